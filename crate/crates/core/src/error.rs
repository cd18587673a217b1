//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes or op arguments are inconsistent.
    #[error("shape error: {0}")]
    Shape(String),

    /// A configuration value is invalid or contradictory.
    #[error("config error: {0}")]
    Config(String),

    /// An on-disk artifact is malformed (bad magic, truncated payload, ...).
    #[error("format error: {0}")]
    Format(String),

    /// An operation was called in a state that cannot support it, e.g.
    /// evaluation with batch-norm statistics that were never updated.
    #[error("state error: {0}")]
    State(String),

    #[error("io error: {0}")]
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
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
    pub fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }
}
