use std::io;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Malformed file, stream, or tensor container.
    #[error("format error: {0}")]
    Format(String),
    /// Invalid argument or configuration value.
    #[error("parameter error: {0}")]
    Parameter(String),
    /// A metric whose value is undefined for the given inputs.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    /// Non-finite value encountered during numeric computation.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Violated internal contract (shape mismatch, broken invariant).
    #[error("internal error: {0}")]
    Internal(String),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    pub fn format(msg: impl AsRef<str>) -> Self {
        Error::Format(msg.as_ref().to_string())
    }
    pub fn parameter(msg: impl AsRef<str>) -> Self {
        Error::Parameter(msg.as_ref().to_string())
    }
    pub fn internal(msg: impl AsRef<str>) -> Self {
        Error::Internal(msg.as_ref().to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
