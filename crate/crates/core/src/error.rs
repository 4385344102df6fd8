use thiserror::Error;

/// Failures inside the differentiable numeric core.
#[derive(Debug, Error)]
pub enum NumericError {
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },
    #[error("masked_softmax: all positions masked")]
    AllMasked,
    #[error("backward called on a consumed tape")]
    TapeConsumed,
    #[error("backward requires a scalar loss, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("invalid learning rate {0}, must be > 0")]
    InvalidLearningRate(f64),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
}

/// Failures in document loading and corpus handling.
#[derive(Debug, Error)]
pub enum DocumentError {
    #[error("document `{doc_id}`: {msg}")]
    Invalid { doc_id: String, msg: String },
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("document has no segments")]
    Empty,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Failures in model construction, training and checkpointing.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Document(#[from] DocumentError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("training diverged (non-finite loss) at epoch {epoch}, document `{doc_id}`")]
    Diverged { epoch: usize, doc_id: String },
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
