use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("solver did not converge: {0}")]
    NonConvergence(String),

    #[error("non-finite value at step {step}: {what}")]
    Numerical { step: usize, what: String },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("unsupported problem family: {0}")]
    Unsupported(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),
}
