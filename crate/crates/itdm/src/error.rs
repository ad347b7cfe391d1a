//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite values produced in {0}")]
    NonFinite(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("{path}: bad IDX magic: expected {expected:#010x}, found {found:#010x}")]
    IdxBadMagic {
        path: String,
        expected: u32,
        found: u32,
    },

    #[error("{path}: truncated IDX file: need {expected} bytes, found {actual}")]
    IdxTruncated {
        path: String,
        expected: usize,
        actual: usize,
    },

    #[error("IDX image/label count mismatch: {images} images vs {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },

    #[error("stale forward cache: model is at version {model}, cache was built at {cache}")]
    StaleCache { model: u64, cache: u64 },

    #[error("training diverged at epoch {epoch} step {step}: train_ce={train_ce} (initial {initial_ce})")]
    Diverged {
        epoch: usize,
        step: usize,
        train_ce: f64,
        initial_ce: f64,
    },

    #[error("checkpoint format version {found} not supported (expected {expected})")]
    CheckpointVersion { expected: u32, found: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
