use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("operation `{0}` has no derivative rule")]
    UnsupportedOp(&'static str),
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch { expected: Vec<usize>, found: Vec<usize> },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("function is not deterministic: two evaluations differ by {0:e}")]
    NonDeterministic(f64),
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("unsupported degree: L = {0} (maximum supported is {1})")]
    UnsupportedDegree(usize, usize),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
