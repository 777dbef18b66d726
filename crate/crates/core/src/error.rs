use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to ingest {path}: {message}")]
    Ingestion { path: PathBuf, message: String },

    #[error("unknown element symbol {symbol:?} in {source_name}")]
    UnknownElement { symbol: String, source_name: String },

    #[error("invalid structure {id}: {reason}")]
    InvalidStructure { id: String, reason: String },

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("non-finite values in crystal {id}: {message}")]
    Numeric { id: String, message: String },

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error(
        "training diverged at epoch {epoch} (loss {loss}); diagnostic checkpoint at {checkpoint}"
    )]
    Divergence {
        epoch: usize,
        loss: f64,
        checkpoint: PathBuf,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("test id {0:?} reached a training routine")]
    TestLeak(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
