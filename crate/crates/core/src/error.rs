use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("size mismatch: expected {expected}, got {actual}")]
    SizeMismatch { expected: usize, actual: usize },

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("conjugate gradient did not converge after {iterations} iterations (relative residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("build simulation failed at slab {slab}: {source}")]
    Build {
        slab: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("optimization failed at iteration {iteration}: {source}")]
    Optimization {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("MMA subproblem infeasible: constraint approximation cannot reach {min_value:e} <= 0 within the move limits")]
    Infeasible { min_value: f64 },

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("bad field file: {0}")]
    Format(String),

    #[error("{0}")]
    Io(#[from] std::io::Error),
}
