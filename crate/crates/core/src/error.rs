use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("line {line}: {msg}")]
    CorpusLine { line: usize, msg: String },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("duplicate document id {0:?}")]
    DuplicateId(String),
    #[error("{0}")]
    InvalidArgument(String),
    #[error("test leakage: {0}")]
    TestLeakage(String),
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("empty document in batch: {0}")]
    EmptyDocument(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("missing {what} (run `{stage}` first)")]
    MissingArtifact { stage: String, what: String },
    #[error("stale artifact {what}: {reason}; re-run `{stage}`")]
    StaleArtifact { stage: String, what: String, reason: String },
    #[error("config: {0}")]
    Config(String),
    #[error("artifact format: {0}")]
    Format(String),
    #[error(transparent)]
    Tensor(#[from] hier_tensor::TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;

pub(crate) fn invalid(msg: impl Into<String>) -> CoreError {
    CoreError::InvalidArgument(msg.into())
}
