use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("validation failed for {path}: {field}: {reason}")]
    Validation {
        path: PathBuf,
        field: String,
        reason: String,
    },

    #[error("checksum mismatch in {path}: manifest says {expected:08x}, blob has {actual:08x}")]
    Checksum {
        path: PathBuf,
        expected: u32,
        actual: u32,
    },

    #[error("dimension mismatch in {path}: expected {expected} bytes, found {actual}")]
    BlobLength {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch}, bag {wsi_id}: {detail}")]
    Diverged {
        epoch: usize,
        wsi_id: String,
        detail: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("png encoding: {0}")]
    Png(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn validation(
        path: impl Into<PathBuf>,
        field: impl Into<String>,
        reason: impl Into<String>,
    ) -> Self {
        Error::Validation {
            path: path.into(),
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by malformed inputs (as opposed to missing files).
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation { .. }
                | Error::Checksum { .. }
                | Error::BlobLength { .. }
                | Error::Json { .. }
                | Error::Shape(_)
                | Error::InvalidArgument(_)
                | Error::NonFinite(_)
                | Error::Empty(_)
        )
    }

    pub fn is_missing(&self) -> bool {
        matches!(self, Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound)
    }
}
