use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors surfaced to filesystem callers.
#[derive(Clone, Debug, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum FsError {
    #[error("no such file or directory")]
    NotFound,
    #[error("file exists")]
    Exists,
    #[error("not a directory")]
    NotDir,
    #[error("is a directory")]
    IsDir,
    #[error("directory not empty")]
    NotEmpty,
    #[error("object key exists both as a file and as a directory")]
    TypeConflict,
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("bad file handle")]
    BadHandle,
    #[error("usage: {0}")]
    Usage(String),
    #[error("transient failure: {0}")]
    Transient(String),
    #[error("timed out")]
    Timeout,
    #[error("node list changed")]
    Stale,
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("corrupt state: {0}")]
    Corrupt(String),
    #[error("staged write no longer present")]
    StageMissing,
}

impl FsError {
    /// Errors worth retrying as a fresh request.
    pub fn is_transient(&self) -> bool {
        matches!(self, FsError::Transient(_) | FsError::Timeout | FsError::Stale | FsError::StageMissing)
    }
}

/// The local node died at an injected crash point; the caller must stop.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Error)]
#[error("node crashed")]
pub struct Crashed;
