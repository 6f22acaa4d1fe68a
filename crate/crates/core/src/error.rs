use thiserror::Error;

/// Errors raised by the numerical kernel, the model layers and training.
#[derive(Debug, Error)]
pub enum PedError {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("matrix is not Hermitian (max asymmetry {max_asymmetry:e})")]
    NotHermitian { max_asymmetry: f64 },

    #[error("power iteration did not converge after {iterations} iterations (estimate {estimate})")]
    PowerIteration {
        iterations: usize,
        estimate: f64,
        last_iterate: Vec<f64>,
    },

    #[error("characteristic form is inconsistent: Gram matrix asymmetry {max_asymmetry:e}")]
    CharFormInconsistent { max_asymmetry: f64 },

    #[error("pre-activation coordinate {coordinate} = {value:e} sits on the ReLU kink")]
    Kink { coordinate: usize, value: f64 },

    #[error("fixed point did not converge for columns {columns:?}")]
    NonConvergence { columns: Vec<usize> },

    #[error("I - J is numerically singular (smallest singular value {min_singular:e})")]
    IllPosed { min_singular: f64 },

    #[error("internal consistency error: {0}")]
    Internal(String),

    #[error("solver abort: {nonconverged} of {batch} samples failed to converge in epoch {epoch}, batch {batch_index}")]
    SolverAbort {
        epoch: usize,
        batch_index: usize,
        nonconverged: usize,
        batch: usize,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, PedError>;
