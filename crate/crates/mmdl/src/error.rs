use std::io;
use std::path::PathBuf;

use mmdl_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("checkpoint error for {member}: {source}")]
    Checkpoint {
        member: String,
        #[source]
        source: Box<Error>,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("usage error: {0}")]
    Usage(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Core(CoreError::Config(msg.into()))
    }

    /// Short machine-parseable category, printed by the command line.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Core(CoreError::Dimension { .. }) => "dimension",
            Error::Core(CoreError::Contract(_)) => "contract",
            Error::Core(CoreError::Numeric(_)) => "numeric",
            Error::Core(CoreError::Config(_)) => "config",
            Error::Format { .. } => "format",
            Error::Checkpoint { .. } => "checkpoint",
            Error::Io { .. } => "io",
            Error::Usage(_) => "usage",
        }
    }
}
