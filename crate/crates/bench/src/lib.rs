//! Synthetic benchmark, training loop, metrics and reporting for the
//! anchor-query segmentation model.

pub mod ablate;
pub mod checkpoint;
pub mod data;
pub mod encode;
pub mod error;
pub mod metrics;
pub mod report;
pub mod train;

pub use error::{BenchError, Result};
