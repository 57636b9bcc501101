//! Language-grounded anchor queries for reasoning segmentation.
//!
//! An ordered query bank `(q_1, …, q_K, q_anc)` is produced by a small
//! recurrent reasoner. The anchor query scores every image token, the scores
//! are resampled into a spatial prior that is added to the decoder features,
//! and a two-way attention decoder conditioned on the whole bank predicts the
//! mask. Token–mask cycle consistency ties the token scores to the mask in
//! both directions.

pub mod checks;
pub mod config;
pub mod decoder;
pub mod error;
pub mod grounding;
pub mod imaging;
pub mod model;
pub mod objectives;
pub mod querybank;
pub mod tensor;

pub use error::{Error, Result};
