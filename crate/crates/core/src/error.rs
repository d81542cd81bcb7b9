use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure raised by a user supplied evaluator (drift, payoff, ...).
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{0}")]
pub struct EvalError(pub String);

impl EvalError {
    pub fn new(msg: impl Into<String>) -> Self {
        EvalError(msg.into())
    }
}

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("failed to evaluate {what}: {source}")]
    Evaluation {
        what: &'static str,
        #[source]
        source: EvalError,
    },

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    /// Explicit time step violates the parabolic stability bound.
    #[error("explicit scheme unstable: dt = {dt:e} exceeds the stable limit {required_dt:e}")]
    Stability { dt: f64, required_dt: f64 },

    #[error("non-finite state on path {path} at step {step}")]
    NonFinite { path: usize, step: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn eval(what: &'static str) -> impl FnOnce(EvalError) -> Error {
        move |source| Error::Evaluation { what, source }
    }
}
