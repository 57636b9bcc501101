use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Core(#[from] anchorseg_core::Error),

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed input file.
    #[error("{file}: {msg}")]
    Format { file: String, msg: String },

    #[error("metrics: {0}")]
    Metric(String),

    /// Training produced a NaN or infinite loss.
    #[error("non-finite loss at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
}

pub type Result<T, E = BenchError> = std::result::Result<T, E>;

pub(crate) fn format_err(file: impl Into<String>, msg: impl Into<String>) -> BenchError {
    BenchError::Format {
        file: file.into(),
        msg: msg.into(),
    }
}
