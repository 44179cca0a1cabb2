use nalgebra::DMatrix;
use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    /// Model parameters violate an invariant (non-PD covariance, bad generator, prior off the simplex).
    #[error("invalid model: {0}")]
    Model(String),

    /// Caller-supplied input is malformed or inconsistent.
    #[error("invalid input: {0}")]
    Input(String),

    /// Every state weight underflowed while filtering an observation.
    #[error("filter degenerate at step {step}: {reason}")]
    FilterDegenerate { step: usize, reason: String },

    /// The penalty matrix A of the closed-form allocation is not positive definite.
    #[error("penalty matrix is not positive definite: {0}")]
    SingularPenalty(String),

    /// Covariance-based decomposition requested with non-covariance penalty matrices.
    #[error("decomposition requires omega = q = covariance")]
    DecompositionUnavailable,

    #[error("estimation failed: {0}")]
    Estimation(String),

    /// Generator fit stopped without meeting its stationarity test; carries the best iterate.
    #[error("nearest generator fit did not converge (objective {objective:.3e} after {iterations} iterations)")]
    GeneratorFit {
        best: DMatrix<f64>,
        objective: f64,
        iterations: usize,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of a numerical routine, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::FilterDegenerate { .. }
                | Error::SingularPenalty(_)
                | Error::Estimation(_)
                | Error::GeneratorFit { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
