use std::path::PathBuf;

use left_core::LeftError;
use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] LeftError),

    #[error("{0}")]
    Input(String),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{}: {message}", path.display())]
    ConfigFile { path: PathBuf, message: String },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    /// 2 for bad input, 3 for shape or checkpoint mismatches, 4 for numeric failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) => match e {
                LeftError::ShapeMismatch(_) | LeftError::Checkpoint(_) => 3,
                LeftError::NonFinite(_) | LeftError::UndefinedMetric(_) => 4,
                _ => 2,
            },
            CliError::Input(_) | CliError::Io { .. } | CliError::ConfigFile { .. } => 2,
        }
    }
}
