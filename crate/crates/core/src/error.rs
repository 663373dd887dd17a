use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid document `{doc}`: {reason}")]
    Document { doc: String, reason: String },

    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },

    #[error("missing file {}", path.display())]
    MissingFile { path: PathBuf },

    #[error("image {}: {reason}", path.display())]
    Image { path: PathBuf, reason: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("topic model: {0}")]
    Topics(String),

    #[error("batch construction: {0}")]
    Batch(String),

    #[error("non-finite loss in task `{task}` at step {step}")]
    NonFiniteLoss { task: String, step: usize },

    #[error("checkpoint version mismatch: file has {found}, expected {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint integrity: {0}")]
    CheckpointIntegrity(String),

    #[error("checkpoint config mismatch in field `{field}`: checkpoint has {stored}, run has {current}")]
    CheckpointConfig { field: String, stored: String, current: String },

    #[error("metrics: {0}")]
    Metrics(String),

    #[error("retrieval: {0}")]
    Retrieval(String),

    #[error("missing prerequisite artifact {}: {hint}", path.display())]
    MissingArtifact { path: PathBuf, hint: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn doc(doc: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Document { doc: doc.into(), reason: reason.into() }
    }
}
