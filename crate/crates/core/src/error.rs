use thiserror::Error;

use crate::optim::Evaluation;

/// Errors produced by the estimators and their numerical core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid parameter `{name}` = {value}")]
    InvalidParameter { name: &'static str, value: f64 },

    #[error("matrix is not symmetric in {0}")]
    NotSymmetric(&'static str),

    #[error("singular system in {context} (jitter tried: {jitter_trace:?})")]
    Singular {
        context: &'static str,
        jitter_trace: Vec<f64>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("optimization failed: all {} evaluations were non-finite or singular", trace.len())]
    OptimizationFailed { trace: Vec<Evaluation> },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn singular(context: &'static str) -> Self {
        Error::Singular {
            context,
            jitter_trace: Vec::new(),
        }
    }
}
