//! Shared error type for the core crate.

use thiserror::Error;

/// Everything that can go wrong in the core crate.
#[derive(Debug, Error)]
pub enum PlutoError {
    #[error("shape mismatch in {context}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        context: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("probability vector not normalized: sum = {sum}")]
    NotNormalized { sum: f64 },
    #[error("negative probability entry: {value}")]
    NegativeProbability { value: f64 },
    #[error("parameter not watched: {0}")]
    NotWatched(String),
    #[error("loss node is not a scalar: shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("bad container magic")]
    BadMagic,
    #[error("unsupported container version {0}")]
    BadVersion(u16),
    #[error("truncated container: expected {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("digest mismatch for {0}")]
    DigestMismatch(String),
    #[error("malformed container header: {0}")]
    BadHeader(String),
    #[error("duplicate id in store: {0}")]
    Conflict(String),
    #[error("id not found in store: {0}")]
    NotFound(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, PlutoError>;

impl PlutoError {
    /// Convenience constructor for dimension errors that should name both shapes.
    pub fn shapes(context: impl Into<String>, lhs: &[usize], rhs: &[usize]) -> Self {
        PlutoError::ShapeMismatch {
            context: context.into(),
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
