//! Circular block bootstrap over dates.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use rsgcir_core::simulate::stream_rng;

use super::{floor_psd, maximize, EstimationError, Objective, OptimizerConfig};

/// Minimum share of replicates that must converge.
pub const MIN_SUCCESS_SHARE: f64 = 0.8;
pub const MIN_REPLICATES: usize = 50;

/// An objective that can be rebuilt on a resampled sequence of dates.
pub trait Resample: Objective + Sized + Send {
    fn n_dates(&self) -> usize;
    /// The objective on the dates `idx`, taken in that order.
    fn resample(&self, idx: &[usize]) -> Result<Self, EstimationError>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootstrapConfig {
    pub block_len: usize,
    pub reps: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapResult {
    pub cov: DMatrix<f64>,
    /// Estimates of the converged replicates, in replicate order.
    pub replicates: Vec<Vec<f64>>,
    pub failed: usize,
}

/// Concatenates blocks of `block_len` consecutive dates, wrapping around the
/// end, from uniformly drawn starts until `n` dates are collected.
pub fn circular_block_indices(n: usize, block_len: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx = Vec::with_capacity(n);
    while idx.len() < n {
        let start = rng.random_range(0..n);
        for k in 0..block_len.min(n - idx.len()) {
            idx.push((start + k) % n);
        }
    }
    idx
}

/// Re-estimates on `reps` resampled panels, each warm-started at `z_hat`
/// with a single start, and returns the covariance of the converged
/// replicate estimates. Replicate `r` draws from stream `r` of `seed`.
pub fn block_bootstrap<O: Resample>(
    obj: &O,
    z_hat: &[f64],
    scales: &[f64],
    cfg: &BootstrapConfig,
) -> Result<BootstrapResult, EstimationError> {
    if cfg.block_len == 0 || cfg.reps < MIN_REPLICATES {
        return Err(EstimationError::InvalidConfig(format!(
            "bootstrap needs block_len >= 1 and at least {MIN_REPLICATES} replicates"
        )));
    }
    let n = obj.n_dates();
    let single = OptimizerConfig { starts: 1, ..cfg.optimizer };
    let outcomes: Vec<Option<Vec<f64>>> = (0..cfg.reps)
        .into_par_iter()
        .map(|r| {
            let idx = circular_block_indices(n, cfg.block_len, &mut stream_rng(cfg.seed, r as u64));
            let replicate = obj.resample(&idx).ok()?;
            let opt = maximize(&replicate, z_hat, scales, &[], &single).ok()?;
            opt.converged.then_some(opt.z)
        })
        .collect();
    let replicates: Vec<Vec<f64>> = outcomes.into_iter().flatten().collect();
    let failed = cfg.reps - replicates.len();
    if (replicates.len() as f64) < MIN_SUCCESS_SHARE * cfg.reps as f64 {
        return Err(EstimationError::TooFewSuccessfulReplicates { ok: replicates.len(), total: cfg.reps });
    }
    let k = z_hat.len();
    let m = replicates.len() as f64;
    let mean = replicates.iter().fold(DVector::zeros(k), |acc, r| acc + DVector::from_column_slice(r)) / m;
    let mut cov = DMatrix::zeros(k, k);
    for r in &replicates {
        let d = DVector::from_column_slice(r) - &mean;
        cov.ger(1.0 / (m - 1.0).max(1.0), &d, &d, 1.0);
    }
    Ok(BootstrapResult { cov: floor_psd(&cov), replicates, failed })
}
