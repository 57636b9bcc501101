use thiserror::Error;

/// Errors raised by the tensor engine and everything built on it.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Two operands disagree on shape.
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A precondition of an operation was violated.
    #[error("{op}: {msg}")]
    Contract { op: &'static str, msg: String },

    /// Invalid configuration (kernel sizes, target extents, ...).
    #[error("configuration: {0}")]
    Config(String),

    /// A gradient or loss value was NaN or infinite.
    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: String, index: usize },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract(op: &'static str, msg: impl Into<String>) -> Error {
    Error::Contract {
        op,
        msg: msg.into(),
    }
}

pub(crate) fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}
