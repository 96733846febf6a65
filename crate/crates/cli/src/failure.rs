use std::path::Path;

use thiserror::Error;

/// Command failure, classified by process exit code.
#[derive(Debug, Error)]
pub enum Failure {
    /// Malformed input: bad manifest field, corrupt checkpoint, empty split. Exit code 2.
    #[error("{0}")]
    Validation(String),
    /// A required file or directory does not exist. Exit code 3.
    #[error("{0}")]
    Missing(String),
    #[error("{0}")]
    Other(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 2,
            Failure::Missing(_) => 3,
            Failure::Other(_) => 1,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        let msg = format!("{}: {e}", path.display());
        if e.kind() == std::io::ErrorKind::NotFound {
            Failure::Missing(msg)
        } else {
            Failure::Other(msg)
        }
    }

    pub fn json(path: &Path, e: serde_json::Error) -> Self {
        Failure::Validation(format!("{}: {e}", path.display()))
    }
}

impl From<daem_core::Error> for Failure {
    fn from(e: daem_core::Error) -> Self {
        let msg = e.to_string();
        if e.is_missing() {
            Failure::Missing(msg)
        } else if e.is_validation() || matches!(e, daem_core::Error::Checkpoint(_)) {
            Failure::Validation(msg)
        } else {
            Failure::Other(msg)
        }
    }
}

pub type CliResult<T> = Result<T, Failure>;
