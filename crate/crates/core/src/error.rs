use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure classes surfaced by the pipeline.
///
/// The variants group into the process exit classes used by the CLI, see
/// [`Error::class`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("malformed row: {0}")]
    MalformedRow(String),

    #[error("{file}: {errors} of {rows} rows malformed, above the {threshold} tolerance")]
    TooManyMalformed {
        file: String,
        errors: u64,
        rows: u64,
        threshold: f64,
    },

    #[error("data quality: {0}")]
    DataQuality(String),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("store format: {0}")]
    Format(String),

    #[error("consistency violation: {0}")]
    Consistency(String),
}

/// Exit class of an [`Error`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    DataQuality,
    Config,
    Internal,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Argument(_) => ErrorClass::Config,
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => ErrorClass::Config,
            Error::Consistency(_) => ErrorClass::Internal,
            _ => ErrorClass::DataQuality,
        }
    }
}
