//! Gaussian hidden Markov models as reduced-form regime diagnostics:
//! Baum-Welch fitting with restarts, information criteria, implied regime
//! durations, and level-ordered state classification.

pub mod fit;
pub mod model;
pub mod summary;

use thiserror::Error;

pub use fit::{fit_hmm, forward_backward, FitConfig, HmmFit, Smoothed};
pub use model::{CovarianceKind, HmmModel};
pub use summary::{
    classify, information_criteria, parameter_count, regime_durations, regime_moments, Classification, RegimeMoments,
};

#[derive(Debug, Error, PartialEq)]
pub enum HmmError {
    #[error("need more than {needed} complete observations, got {got}")]
    TooFewObservations { needed: usize, got: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("observation {0} has zero likelihood under every state")]
    ZeroLikelihood(usize),
    #[error("state {0} is absorbing; its expected duration is infinite")]
    AbsorbingState(usize),
    #[error("all {0} restarts failed")]
    AllRestartsFailed(usize),
}
