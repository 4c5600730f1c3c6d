use thiserror::Error;

/// Errors surfaced by model construction, factorization, and optimization.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke a documented precondition (dimension mismatch, bad labels, invalid option).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A factorization or solve failed even after jitter was applied.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// An iterative routine exhausted its budget without meeting its tolerance.
    #[error("optimization failure: {0}")]
    Optimization(String),

    /// Malformed input file or serialized document.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub fn optimization(msg: impl Into<String>) -> Self {
        Error::Optimization(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
