//! Shared error type. Variants are coarse on purpose: callers either print
//! the message or map the class to an exit code, nothing inspects payloads.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or dimensionality mismatch between tensors, frames or joints.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A file or stream did not follow the expected format.
    #[error("parse error in {path} line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    /// Structured binary or JSON input was malformed.
    #[error("format error: {0}")]
    Format(String),

    /// An operation was called with arguments that violate its contract.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Training diverged; reported instead of silently producing NaNs.
    #[error("non-finite loss at epoch {epoch} batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    /// Degenerate geometry, e.g. zero shoulder distance in every frame.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
