//! Quasi-maximum-likelihood estimation of the two filter stages, sandwich
//! standard errors, and the block bootstrap.

pub mod bootstrap;
pub mod params;
pub mod sandwich;
pub mod stages;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use rsgcir_core::optim::{coordinate_polish, nelder_mead, NelderMeadConfig};
use rsgcir_core::pricing::PricingError;
use rsgcir_core::simulate::stream_rng;
use thiserror::Error;

use crate::FilterError;
pub use params::{ModelState, ParamVector, Stage, Transform};

#[derive(Debug, Error)]
pub enum EstimationError {
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Pricing(#[from] PricingError),
    #[error("log-likelihood is not finite at the starting point")]
    NonFiniteLikelihood,
    #[error("parameters are outside the admissible region: {0}")]
    Infeasible(String),
    #[error("unknown parameter {0}")]
    UnknownParameter(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("only {ok} of {total} bootstrap replicates converged")]
    TooFewSuccessfulReplicates { ok: usize, total: usize },
}

/// A log-likelihood made of per-date contributions, evaluated on the
/// unconstrained parameter scale.
pub trait Objective: Sync {
    fn contributions(&self, z: &[f64]) -> Result<Vec<f64>, EstimationError>;

    fn loglik(&self, z: &[f64]) -> Result<f64, EstimationError> {
        Ok(self.contributions(z)?.iter().sum())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub starts: usize,
    /// Relative spread of the long-run level perturbations for extra starts.
    pub start_spread: f64,
    pub nelder_mead: NelderMeadConfig,
    /// Coordinate sweeps of the parabolic polish after each start.
    pub polish_sweeps: usize,
    pub polish_step: f64,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            starts: 5,
            start_spread: 0.1,
            nelder_mead: NelderMeadConfig { max_evals: 4000, f_tol: 1e-7, x_tol: 1e-6, initial_step: 0.1 },
            polish_sweeps: 3,
            polish_step: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StartReport {
    pub start: Vec<f64>,
    pub loglik: f64,
    pub evals: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimum {
    pub z: Vec<f64>,
    pub loglik: f64,
    pub start_loglik: f64,
    pub converged: bool,
    pub starts: Vec<StartReport>,
}

/// Perturbs the listed coordinates by a relative uniform factor in
/// `1 +/- spread`.
fn perturbed_start(z0: &[f64], indices: &[usize], spread: f64, rng: &mut impl Rng) -> Vec<f64> {
    let mut z = z0.to_vec();
    for &i in indices {
        z[i] *= 1.0 + spread * rng.random_range(-1.0..1.0);
    }
    z
}

fn run_start(obj: &impl Objective, start: &[f64], scales: &[f64], cfg: &OptimizerConfig) -> StartReport {
    let to_z = |u: &[f64]| -> Vec<f64> { start.iter().zip(scales).zip(u).map(|((s, k), u)| s + k * u).collect() };
    let f = |u: &[f64]| obj.loglik(&to_z(u)).map(|l| -l).unwrap_or(f64::INFINITY);
    let nm = nelder_mead(f, &vec![0.0; start.len()], &cfg.nelder_mead);
    let polished = coordinate_polish(f, &nm.x, nm.f, cfg.polish_step, cfg.polish_sweeps);
    StartReport {
        start: to_z(&polished.x),
        loglik: -polished.f,
        evals: nm.evals + polished.evals,
        converged: nm.converged,
    }
}

/// Maximizes `obj` from `z0` and `cfg.starts - 1` perturbed starts, which
/// move only the coordinates in `perturb`. Each start runs Nelder-Mead on
/// coordinates scaled by `scales`, then a parabolic polish. The best start
/// wins, ties going to the earlier one, so the result never falls below the
/// starting log-likelihood.
pub fn maximize(
    obj: &impl Objective,
    z0: &[f64],
    scales: &[f64],
    perturb: &[usize],
    cfg: &OptimizerConfig,
) -> Result<Optimum, EstimationError> {
    let start_loglik = obj.loglik(z0)?;
    if !start_loglik.is_finite() {
        return Err(EstimationError::NonFiniteLikelihood);
    }
    let mut rng = stream_rng(cfg.seed, 0);
    let mut starts = vec![z0.to_vec()];
    for _ in 1..cfg.starts.max(1) {
        if perturb.is_empty() {
            break;
        }
        let feasible = (0..10)
            .map(|_| perturbed_start(z0, perturb, cfg.start_spread, &mut rng))
            .find(|z| obj.loglik(z).is_ok_and(f64::is_finite));
        match feasible {
            Some(z) => starts.push(z),
            None => log::warn!("no feasible perturbed start found; skipping"),
        }
    }
    let reports: Vec<StartReport> = starts.par_iter().map(|s| run_start(obj, s, scales, cfg)).collect();
    let mut best = 0;
    for (i, r) in reports.iter().enumerate() {
        log::debug!("start {i}: loglik {:.6} after {} evaluations", r.loglik, r.evals);
        if r.loglik > reports[best].loglik {
            best = i;
        }
    }
    let (z, loglik) = if reports[best].loglik >= start_loglik {
        (reports[best].start.clone(), reports[best].loglik)
    } else {
        (z0.to_vec(), start_loglik)
    };
    let converged = reports[best].converged;
    if !converged {
        log::warn!("best start stopped at the evaluation limit without meeting the tolerances");
    }
    Ok(Optimum { z, loglik, start_loglik, converged, starts: reports })
}

/// Symmetrizes and floors eigenvalues at zero.
pub fn floor_psd(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = rsgcir_core::linalg::symmetrize(a).symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| v.max(0.0));
    let out = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    rsgcir_core::linalg::symmetrize(&out)
}

/// Stage estimate with names, natural-scale values, and covariances on the
/// unconstrained scale.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimationResult {
    pub stage: Stage,
    pub names: Vec<String>,
    pub transforms: Vec<Transform>,
    pub z: Vec<f64>,
    pub estimates: Vec<f64>,
    pub loglik: f64,
    pub start_loglik: f64,
    pub converged: bool,
    pub starts: Vec<StartReport>,
    pub robust_cov: Option<DMatrix<f64>>,
    pub bootstrap_cov: Option<DMatrix<f64>>,
    pub seed: u64,
}

impl EstimationResult {
    fn natural_se(&self, cov: &DMatrix<f64>) -> Vec<f64> {
        (0..self.z.len())
            .map(|i| self.transforms[i].derivative(self.z[i]).abs() * cov[(i, i)].max(0.0).sqrt())
            .collect()
    }

    /// Delta-method standard errors on the natural scale.
    pub fn robust_se(&self) -> Option<Vec<f64>> {
        self.robust_cov.as_ref().map(|c| self.natural_se(c))
    }

    pub fn bootstrap_se(&self) -> Option<Vec<f64>> {
        self.bootstrap_cov.as_ref().map(|c| self.natural_se(c))
    }
}
