use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, S2skError>;

#[derive(Debug, Error)]
pub enum S2skError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty climatology window for calendar slot {slot} (day-of-year {})", slot + 1)]
    EmptyWindow { slot: usize },

    #[error("missing climatology entry for calendar slot {0}")]
    MissingCalendarDay(usize),

    #[error("sinkhorn produced non-finite values at iteration {iteration} (epsilon = {epsilon}); epsilon is too small for the cost scale")]
    SinkhornNonFinite { epsilon: f64, iteration: usize },

    #[error("non-finite latent at rollout step {step}")]
    NonFiniteLatent { step: usize },

    #[error("undefined metric: {0}")]
    Undefined(String),

    #[error("tensor format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("truncated payload in {path}: expected {expected} bytes, found {actual}")]
    Truncated {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl S2skError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        S2skError::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        S2skError::InvalidArgument(msg.into())
    }
}
