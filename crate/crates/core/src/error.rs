use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("invalid adapter spec: {0}")]
    InvalidSpec(String),

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("merge unsupported at sites [{}]", sites.join(", "))]
    MergeUnsupported { sites: Vec<String> },

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("invariant violation: {0}")]
    InvariantViolation(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("token {token} at position {position} out of range for vocabulary of {vocab}")]
    TokenOutOfRange {
        token: usize,
        position: usize,
        vocab: usize,
    },

    #[error("benchmark error: {0}")]
    Bench(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}
