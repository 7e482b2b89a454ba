use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("not found: {}", path.display())]
    NotFound { path: PathBuf },

    #[error("cannot decode {}: {message}", path.display())]
    Decode { path: PathBuf, message: String },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed checkpoint field `{field}`: {message}")]
    Format { field: String, message: String },

    #[error("dataset integrity: {0}")]
    Integrity(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("non-finite value in {0}")]
    Numeric(String),
}

impl Error {
    /// Wraps an I/O error with its path; missing files become [`Error::NotFound`].
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound { path }
        } else {
            Error::Io { path, source }
        }
    }

    /// Short stable identifier, used for machine-readable error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NotFound { .. } => "not_found",
            Error::Decode { .. } => "decode",
            Error::Io { .. } => "io",
            Error::Dimension(_) => "dimension",
            Error::Config(_) => "config",
            Error::Format { .. } => "format",
            Error::Integrity(_) => "integrity",
            Error::Argument(_) => "argument",
            Error::Numeric(_) => "numeric",
        }
    }

    /// The filesystem path involved, if any.
    pub fn path(&self) -> Option<&std::path::Path> {
        match self {
            Error::NotFound { path } | Error::Decode { path, .. } | Error::Io { path, .. } => {
                Some(path)
            }
            _ => None,
        }
    }
}
