use thiserror::Error;

/// Errors raised anywhere in the assimilation stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: &'static str, reason: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("ensemble needs at least {required} members, got {got}")]
    EnsembleTooSmall { required: usize, got: usize },

    #[error("fixed-point iteration did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("matrix is singular or not positive definite: {0}")]
    Singular(String),

    #[error("non-finite state encountered: {0}")]
    NonFinite(String),

    #[error("observation {index} has no model step inside its mollifier support")]
    EmptySupport { index: usize },

    #[error("trajectory has {available} samples, {required} required")]
    ShortTrajectory { available: usize, required: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter { field, reason: reason.into() }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
