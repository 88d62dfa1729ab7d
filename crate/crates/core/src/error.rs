use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library can surface.
///
/// Variants are grouped into classes that map onto process exit codes in the
/// command-line tool (see [`Error::exit_code`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("inference diverged at step {step}: mean loss {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("classifier gate failed: clean test accuracy {accuracy:.4} < {threshold}")]
    Gate { accuracy: f64, threshold: f64 },

    #[error("missing or unusable asset: {0}")]
    Asset(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Exit code taxonomy: 2 config, 3 IO/format, 4 numeric divergence,
    /// 5 gate failure, 1 for internal contract errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parameter(_) => 2,
            Error::Io { .. } | Error::Format { .. } | Error::Integrity(_) | Error::Asset(_) => 3,
            Error::Numeric(_) | Error::Divergence { .. } => 4,
            Error::Gate { .. } => 5,
            Error::Dimension(_) | Error::Contract(_) => 1,
        }
    }
}
