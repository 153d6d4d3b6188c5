use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("format error in record {record}: {message}")]
    Format { record: usize, message: String },

    #[error("format error in manifest: {0}")]
    Manifest(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Coarse category used by the CLI for exit diagnostics.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) | Error::Validation(_) => "config",
            Error::Dimension(_)
            | Error::Format { .. }
            | Error::Manifest(_)
            | Error::Checkpoint(_)
            | Error::Io { .. } => "data",
            Error::Numeric(_) => "numeric",
            Error::Unsupported(_) => "config",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
