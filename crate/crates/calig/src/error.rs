//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CaligError {
    /// Tensor shapes incompatible for an operation. Carries both shapes.
    #[error("shape mismatch in {op}: lhs {lhs:?} vs rhs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An API contract was violated (wrong argument, non-scalar backward seed, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Bad user input (out-of-range token id, overlong sequence, ...).
    #[error("invalid input: {0}")]
    Input(String),

    /// Invalid configuration.
    #[error("invalid config: {0}")]
    Config(String),

    /// Training diverged (NaN/Inf loss).
    #[error("training diverged at step {step}: {detail}")]
    Training { step: usize, detail: String },

    /// Checkpoint or dataset file could not be parsed.
    #[error("parse error at byte offset {offset}: {detail}")]
    Parse { offset: usize, detail: String },

    /// Checkpoint contents disagree with its own header.
    #[error("integrity error on tensor '{tensor}': {detail}")]
    Integrity { tensor: String, detail: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CaligError>;
