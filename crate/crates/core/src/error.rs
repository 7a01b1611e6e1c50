use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are incompatible for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// A configuration value is invalid (bad size, ratio, divisibility, ...).
    #[error("invalid configuration: {0}")]
    Config(String),
    /// An index (class label, tap id, ...) is out of range.
    #[error("index out of range: {0}")]
    Index(String),
    /// An API contract was violated (e.g. backward on a non-scalar).
    #[error("contract violation: {0}")]
    Contract(String),
    /// A file has the wrong format (dataset records, checkpoints, images).
    #[error("format error: {0}")]
    Format(String),
    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
