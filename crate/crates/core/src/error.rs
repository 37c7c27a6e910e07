use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read or write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed tensor file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("invalid json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    /// Inputs are internally inconsistent (shapes, split overlap, schema).
    #[error("validation failed: {0}")]
    Validation(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Bad values in otherwise well-formed data (NaN betas, zero-norm vectors).
    #[error("data error: {0}")]
    Data(String),

    #[error("missing key: {0}")]
    MissingKey(String),

    #[error("linear solver failed: {0}")]
    Solver(String),

    /// Loss went non-finite during training.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("stage dependency not satisfied: {0}")]
    Dependency(String),

    #[error("language model backend: {0}")]
    Backend(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
