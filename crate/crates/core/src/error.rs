use std::path::PathBuf;

/// Errors raised anywhere in the training, evaluation and I/O stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("numerical divergence: {0}")]
    NonFinite(String),
    #[error("token id {token} is outside the vocabulary (size {vocab_size})")]
    TokenOutOfRange { token: usize, vocab_size: usize },
    #[error("response contains the PAD token at position {0}")]
    PadInResponse(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("every group was filtered out; resample the batch")]
    EmptyBatch,
    #[error("step {step}: all groups filtered after {attempts} generation batches")]
    AllGroupsFiltered { step: u64, attempts: usize },
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error("checkpoint is corrupt: {0}")]
    CheckpointCorrupt(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            context: path.into().display().to_string(),
            source,
        }
    }
}
