use alloc::string::String;

/// Errors raised by the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid MDP: {0}")]
    InvalidMdp(String),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("support violation at state {state}, action {action}: target probability {target} but behavior probability 0")]
    SupportViolation {
        state: usize,
        action: usize,
        target: f64,
    },
    #[error("singular linear system: {0}")]
    Singular(&'static str),
    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("no episode of length >= {0} and truncation disabled")]
    NoSegments(usize),
}

pub type Result<T> = core::result::Result<T, Error>;
