use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric instability: non-finite values after layer {layer}")]
    NumericInstability { layer: usize },

    #[error("non-finite loss `{name}` at step {step}")]
    NonFiniteLoss { name: String, step: u64 },

    #[error("empty sequence at batch row {0}")]
    EmptySequence(usize),

    #[error("degenerate embedding (norm {0:e})")]
    DegenerateEmbedding(f64),

    #[error("empty supervision: no labeled positions")]
    EmptySupervision,

    #[error("empty batch")]
    EmptyBatch,

    #[error("invalid word alignment: {0}")]
    Alignment(String),

    #[error("adapter already merged")]
    AlreadyMerged,

    #[error("adapter is not merged")]
    NotMerged,

    #[error("clustering error: {0}")]
    Clustering(String),

    #[error("label set mismatch: {0}")]
    LabelMismatch(String),

    #[error("entity bank has no entries for type(s): {0}")]
    MissingEntityType(String),

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("checkpoint corrupt: {0}")]
    Corrupt(String),

    #[error("checkpoint version {found} is newer than supported version {supported}")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("backbone hash mismatch: manifest expects {expected}, found {found}")]
    HashMismatch { expected: String, found: String },

    #[error("plan validation failed: {0}")]
    Plan(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
