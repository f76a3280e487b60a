//! Filtering and estimation for the regime-switching GCIR term-structure
//! model.

pub mod blocks;
pub mod estimation;
pub mod moments;
pub mod pricing_errors;
pub mod rsukf;
pub mod ukf;

use rsgcir_core::pricing::PricingError;
use rsgcir_core::regimes::RegimeError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite value in filter recursion")]
    NonFinite,
    #[error("covariance is not positive semidefinite (min eigenvalue {0:e})")]
    NotPositiveSemidefinite(f64),
    #[error("Cholesky factorization failed (min eigenvalue {0:e})")]
    CholeskyFailure(f64),
    #[error("innovation covariance is singular")]
    SingularInnovationCov,
    #[error("every regime assigns zero likelihood to the observation")]
    ZeroMixtureLikelihood,
    #[error("invalid regime probabilities {0:?}")]
    InvalidProbabilities(Vec<f64>),
    #[error("missing series: {0}")]
    MissingSeries(String),
    #[error(transparent)]
    Pricing(#[from] PricingError),
    #[error(transparent)]
    Regime(#[from] RegimeError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
