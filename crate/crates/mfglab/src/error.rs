//! Error type shared by every module of the laboratory.
//!
//! Numerical failure modes are first-class citizens here: a trajectory that
//! leaves the trust region, a Newton solve that stalls, or a frequency grid
//! too coarse for the kernel it is supposed to resolve all surface as typed
//! errors rather than NaN-laden results.

use thiserror::Error;

/// Everything that can go wrong in the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed caller input: dimension mismatches, empty clouds, bad ranges.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The kinetic matrix must be symmetric positive definite.
    #[error("kinetic matrix is not symmetric positive definite: {0}")]
    KineticMatrix(String),

    /// A trajectory exceeded the blow-up threshold before the final time.
    #[error("trajectory blew up at s = {time:.6e} (|state| > {threshold:.1e})")]
    BlowUp { time: f64, threshold: f64 },

    /// Newton inversion of the characteristic flow did not converge.
    #[error("flow inversion stalled after {iters} iterations (residual {residual:.3e})")]
    InversionFailure { iters: usize, residual: f64 },

    /// The flow Jacobian determinant changed sign along the trajectory.
    #[error("conjugate point: flow Jacobian determinant vanished near s = {time:.6e}")]
    ConjugatePoint { time: f64 },

    /// An iterative minimization exhausted its budget.
    #[error("optimization failed: {0}")]
    OptimizationFailure(String),

    /// The quadrature or frequency grid cannot resolve the requested kernel.
    #[error("resolution failure: {0}")]
    Resolution(String),

    /// A linear solve met a singular matrix where a regular one was required.
    #[error("singular matrix in {0}")]
    SingularMatrix(String),

    /// Configuration file problems: unknown keys, missing fields, bad values.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 64 for usage and config problems,
    /// 1 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidInput(_) => 64,
            _ => 1,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
