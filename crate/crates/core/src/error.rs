//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes; the message carries both shapes.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An argument violated a documented precondition.
    #[error("invalid parameter: {0}")]
    Param(String),

    /// A count or index fell outside its allowed range.
    #[error("out of range: {0}")]
    Range(String),

    /// An API contract was violated (wrong call sequence, non-scalar loss, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A non-finite value appeared during integration or training.
    #[error("divergence at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    /// Evaluation was asked to run on data seen during training.
    #[error("split leakage: {0}")]
    SplitLeakage(String),

    /// Malformed dataset, manifest, or checkpoint contents.
    #[error("data format: {0}")]
    Format(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Build a shape error from two shape slices.
    pub fn shape(context: &str, a: &[usize], b: &[usize]) -> Self {
        Error::Shape(format!("{context}: {a:?} vs {b:?}"))
    }
}
