use std::path::Path;

use hgcn::bio::BioError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("unknown document {0}")]
    UnknownDocument(usize),
    #[error("document {id} has no target {target}")]
    UnknownTarget { id: usize, target: usize },
    #[error(transparent)]
    Bio(#[from] BioError),
    #[error("{0}")]
    Invalid(String),
    #[error("version conflict: expected {expected}, stored record is at {actual}")]
    Conflict { expected: u64, actual: u64 },
    #[error("document {id}: {message}")]
    Mismatch { id: usize, message: String },
    #[error("{path} is not a valid document: {message}")]
    Corrupt { path: String, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl StoreError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        StoreError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// The HTTP status this error maps to.
    pub fn status(&self) -> u16 {
        match self {
            StoreError::UnknownDocument(_) | StoreError::UnknownTarget { .. } => 404,
            StoreError::Bio(_) | StoreError::Invalid(_) => 422,
            StoreError::Conflict { .. } => 409,
            StoreError::Mismatch { .. } | StoreError::Corrupt { .. } | StoreError::Io { .. } => 500,
        }
    }
}

pub type Result<T> = std::result::Result<T, StoreError>;
