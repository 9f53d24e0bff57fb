use numkit::NumError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, QgError>;

#[derive(Debug, Error)]
pub enum QgError {
    #[error(transparent)]
    Num(#[from] NumError),

    /// A corpus record that breaks an [`crate::corpus::AnnotatedExample`] invariant.
    #[error("line {line}: {reason}")]
    Validation { line: usize, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("decode error: id {id} outside vocabulary of size {size}")]
    Decode { id: u32, size: usize },

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("graph node {node} has no neighbors")]
    DegenerateNode { node: usize },

    #[error("ensemble error: {0}")]
    Ensemble(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step} (batch examples {batch:?})")]
    NonFiniteLoss { step: u64, batch: Vec<String> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl QgError {
    pub fn is_config(&self) -> bool {
        matches!(self, QgError::Config(_) | QgError::Num(NumError::Config(_)))
    }
}
