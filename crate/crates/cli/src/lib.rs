//! Pipeline for the regime-switching GCIR model: configuration, stage
//! orchestration, artifacts with manifests, validation checks, and reports.

pub mod artifacts;
pub mod checks;
pub mod config;
pub mod pipeline;
pub mod report;
pub mod svg;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("input: {0}")]
    Input(String),
    #[error("computation: {0}")]
    Compute(String),
    #[error("output: {0}")]
    Output(String),
    #[error("{failed} of {total} checks failed")]
    ChecksFailed { failed: usize, total: usize },
}

impl CliError {
    /// Process exit status for the error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::ChecksFailed { .. } => 1,
            CliError::Config(_) => 2,
            CliError::Input(_) => 3,
            CliError::Compute(_) => 4,
            CliError::Output(_) => 5,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Output(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Output(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Output(e.to_string())
    }
}

impl From<rsgcir_core::panel::PanelError> for CliError {
    fn from(e: rsgcir_core::panel::PanelError) -> Self {
        CliError::Input(e.to_string())
    }
}

/// Errors from the numerical crates are computation failures.
macro_rules! compute_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Compute(e.to_string())
            }
        }
    )*};
}

compute_error!(
    rsgcir_core::pricing::PricingError,
    rsgcir_core::ratings::RatingError,
    rsgcir_core::regimes::RegimeError,
    rsgcir_core::simulate::SimulationError,
    rsgcir_filter::FilterError,
    rsgcir_filter::estimation::EstimationError,
    rsgcir_hmm::HmmError
);
