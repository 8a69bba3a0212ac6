use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("start placement failed after {0} attempts")]
    Placement(usize),

    #[error("non-finite loss during update: {0}")]
    Diverged(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, used for CLI error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) | Error::Placement(_) | Error::Parse { .. } => "config",
            Error::Io { .. } => "io",
            Error::Checkpoint(_) => "checkpoint",
            Error::Invalid(_) | Error::NonFinite(_) | Error::Dimension { .. } => "invalid",
            Error::Diverged(_) => "diverged",
        }
    }
}
