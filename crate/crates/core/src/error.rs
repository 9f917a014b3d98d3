use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or indices that do not agree with each other.
    #[error("structural error: {0}")]
    Structural(String),

    /// A value outside the domain of an operation (non-positive scale, T < 2, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid configuration, unknown generator kind, empty split, bad flag value.
    #[error("config error: {0}")]
    Config(String),

    /// Optimizer produced a non-finite energy. The energy trace up to the
    /// failure is attached.
    #[error("divergence after {} iterations: {message}", trace.len())]
    Divergence { message: String, trace: Vec<f64> },

    /// NaN or infinite values in training or evaluation.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("failed to parse {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn structural(msg: impl Into<String>) -> Self {
        Error::Structural(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl std::fmt::Display) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }

    /// Process exit code: 1 for validation/config problems, 2 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence { .. } | Error::Numerical(_) => 2,
            _ => 1,
        }
    }
}
