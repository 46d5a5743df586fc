use thiserror::Error;

use crate::handle_space::{PoolId, VirtualHandle};

/// Raised when a pool cannot satisfy an allocation request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("{pool} pool exhausted: requested {requested_pages} pages, {free_pages_at_failure} free")]
pub struct CapacityError {
    pub pool: PoolId,
    pub requested_pages: u32,
    pub free_pages_at_failure: u32,
}

#[derive(Debug, Error)]
pub enum AvmpError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Capacity(#[from] CapacityError),
    #[error("stale handle {0}")]
    StaleHandle(VirtualHandle),
    #[error("resize refused: {0}")]
    ResizeRefused(String),
    #[error("logic error: {0}")]
    Logic(String),
    #[error("workload ingestion failed: {reason} ({skipped} records skipped)")]
    Ingestion { reason: String, skipped: usize },
    #[error("pairing error: {0}")]
    Pairing(String),
    #[error("statistics error: {0}")]
    Stats(String),
    #[error("schema mismatch: expected {expected}, found {found}")]
    Schema { expected: String, found: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("cell failed: {reason}\n  config: {config}")]
    CellFailed { config: String, reason: String },
}

impl AvmpError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        AvmpError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T, E = AvmpError> = std::result::Result<T, E>;
