//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported NIfTI datatype code {0} (supported: uint8, int16, int32, float32)")]
    UnsupportedDatatype(i16),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("geometry mismatch: {0}")]
    Geometry(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing feature '{0}' in input vector")]
    MissingFeature(String),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit code the CLI maps this error to (2 = configuration error).
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}
