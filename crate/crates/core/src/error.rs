use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CavError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("CAV solver did not converge after {iterations} iterations (gradient norm {grad_norm:e})")]
    Convergence { iterations: usize, grad_norm: f64 },

    #[error("{what} of size {size} exceeds the cap of {cap}; {hint}")]
    Capacity { what: &'static str, size: usize, cap: usize, hint: &'static str },

    #[error("matrix is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },
}

impl CavError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Self::InvalidInput(msg.into())
    }
}

pub type Result<T, E = CavError> = std::result::Result<T, E>;
