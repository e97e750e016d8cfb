//! Crate-wide error type. Domain failures are recoverable `Err` values;
//! programmer errors (indexing bugs, contract violations inside the crate)
//! panic instead.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("domain error in {op}: {msg}")]
    Domain { op: &'static str, msg: String },

    #[error("non-finite gradient for parameter {name}")]
    NonFiniteGrad { name: String },

    #[error("training diverged at step {step}: {msg}")]
    Diverged { step: usize, msg: String },

    #[error("inconsistent rollout trace at step {step}: {msg}")]
    InconsistentTrace { step: usize, msg: String },

    #[error("enumeration rejected: estimated {estimate:.3e} trajectories exceeds budget {budget:.3e}")]
    StateSpaceOverflow { estimate: f64, budget: f64 },

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

impl Error {
    /// Shorthand for `Error::InvalidArgument` with formatted text.
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
