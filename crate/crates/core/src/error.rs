use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("numeric domain error in {op}: input {value}")]
    NumericDomain { op: &'static str, value: f64 },

    #[error("backward requires a 1x1 root, got {rows}x{cols}")]
    NonScalarRoot { rows: usize, cols: usize },

    #[error("class index {index} out of range for k = {k}")]
    ClassIndex { index: usize, k: usize },

    #[error("embedding row {row} has zero norm")]
    DegenerateEmbedding { row: usize },

    #[error("need at least {needed} points, got {available}")]
    InsufficientData { needed: usize, available: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("training diverged at iteration {iteration}: loss = {loss}")]
    Divergence { iteration: u64, loss: f64 },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
