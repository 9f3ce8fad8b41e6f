use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure class, used by front-ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("sequence is empty; mean pooling needs at least one token")]
    EmptySequence,
    #[error("token id {id} is out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("cosine similarity undefined for a zero-norm vector")]
    ZeroNorm,
    #[error("label {0} is not in {{0, 1}}")]
    InvalidLabel(u8),
    #[error("batch of size {0} is too small; in-batch negatives need at least 2 pairs")]
    BatchTooSmall(usize),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("task `{0}` has an empty dataset")]
    EmptyDataset(String),
    #[error("task `{task}`, example {index}: {reason}")]
    InvalidExample { task: String, index: usize, reason: String },
    #[error("non-finite value during training (task `{task}`, step {step}): {detail}")]
    NonFinite { task: String, step: usize, detail: String },
    #[error("calibration needs at least one {0} example")]
    MissingClass(&'static str),
    #[error("text `{id}` is empty after tokenization")]
    EmptyText { id: String },
    #[error("query `{0}` has no search result")]
    MissingQuery(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error("malformed input: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::ShapeMismatch(_) => ErrorKind::Config,
            Error::NonFinite { .. } | Error::ZeroNorm => ErrorKind::Numeric,
            Error::Io(_) => ErrorKind::Io,
            _ => ErrorKind::Data,
        }
    }
}
