use thiserror::Error;

use crate::TaskId;

pub type Result<T, E = DclError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DclError {
    #[error("unknown task id {0}")]
    UnknownTask(TaskId),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("training diverged: non-finite loss {0}")]
    Diverged(f64),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("missing Fisher diagonal for snapshot {0}")]
    MissingFisher(usize),

    #[error("mixed transferability metrics in offers")]
    MixedMetrics,

    #[error("degenerate fit: {0}")]
    Degenerate(&'static str),

    #[error("bad IDX magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { expected: u32, found: u32 },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("malformed payload: {0}")]
    Payload(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
