use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// An object is not in a state that permits the operation.
    #[error("state error: {0}")]
    State(String),

    /// The operation was refused, usually because an exact computation would be too large.
    #[error("refused: {0}")]
    Refused(String),

    /// A configuration value is missing or invalid.
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    /// Training produced a non-finite value and was stopped.
    #[error("training aborted at step {step}: {reason}")]
    TrainingAborted { step: usize, reason: String },

    /// A file did not match the expected on-disk format.
    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }

    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
