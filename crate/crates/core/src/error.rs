use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = LeftError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LeftError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("dataset not found at {}", .0.display())]
    DatasetNotFound(PathBuf),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl LeftError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        LeftError::InvalidInput(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        LeftError::ShapeMismatch(msg.into())
    }
}
