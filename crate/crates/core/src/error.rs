use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value: {0}")]
    Numeric(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("token id {id} out of range for vocabulary of size {size}")]
    Vocab { id: usize, size: usize },
    #[error("gaussian fit failed: {0}")]
    Fit(String),
    #[error("scoring failed: {0}")]
    Score(String),
    #[error("metric undefined: {0}")]
    Metric(String),
    #[error("{path}:{line}: {msg}")]
    Ingest { path: String, line: usize, msg: String },
    #[error("{path}: label {label:?} does not occur in the training split")]
    Label { path: String, label: String },
    #[error("incompatible checkpoint: {0}")]
    Compat(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}
