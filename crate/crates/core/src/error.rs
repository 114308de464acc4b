use thiserror::Error;

/// Errors raised across the simulation, solver and diagnostic layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("resolution error: {0}")]
    Resolution(String),
    #[error("unsupported Hermite order q = {0} (exact simulation supports q in {{1, 2}})")]
    UnsupportedOrder(usize),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("Picard iteration did not converge in {iterations} iterations (last residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("solver resolution error: {0}")]
    SolverResolution(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("state error: {0}")]
    State(String),
    #[error("structural violation: {0}")]
    StructuralViolation(String),
    #[error("sample size error: need at least {required} samples, got {got}")]
    SampleSize { required: usize, got: usize },
    #[error("report error: {0}")]
    Report(String),
}

pub type Result<T> = std::result::Result<T, Error>;
