use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("malformed row {row}: {msg}")]
    MalformedRow { row: usize, msg: String },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("non-finite gradient in tensor '{0}'")]
    NonFiniteGradient(String),

    #[error("training diverged at epoch {epoch}: total loss is not finite")]
    Diverged { epoch: usize },

    #[error("non-deterministic loss function: two forward passes disagree")]
    NonDeterministicLoss,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
