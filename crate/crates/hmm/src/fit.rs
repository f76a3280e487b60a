//! Scaled forward-backward recursions and Baum-Welch fitting.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rayon::prelude::*;
use rsgcir_core::simulate::stream_rng;

use crate::model::{CovarianceKind, HmmModel};
use crate::HmmError;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
/// Smallest covariance eigenvalue after an M-step.
pub const COV_FLOOR: f64 = 1e-8;
const MIN_STATE_WEIGHT: f64 = 2.0;
const KMEANS_ITERS: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    pub k: usize,
    pub restarts: usize,
    pub max_iter: usize,
    /// Relative log-likelihood change that ends EM.
    pub tol: f64,
    pub covariance: CovarianceKind,
    pub seed: u64,
}

impl FitConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self { k, restarts: 10, max_iter: 500, tol: 1e-8, covariance: CovarianceKind::Full, seed }
    }
}

/// Posterior state quantities from one forward-backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Smoothed {
    pub loglik: f64,
    /// `[t][k]` smoothed state probabilities.
    pub gamma: Vec<DVector<f64>>,
    /// Expected transition counts summed over dates.
    pub transitions: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HmmFit {
    /// Fitted model with states in ascending level order.
    pub model: HmmModel,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Log-likelihood before each M-step of the winning restart.
    pub loglik_path: Vec<f64>,
    /// States with fewer than two effective observations, in the fitted
    /// order.
    pub degenerate: Vec<usize>,
    /// Final log-likelihood of each restart; `None` for failed restarts.
    pub restart_logliks: Vec<Option<f64>>,
    /// Rows of the input used in the fit.
    pub kept: Vec<usize>,
}

fn factor(cov: &DMatrix<f64>) -> Cholesky<f64, Dyn> {
    let m = cov.nrows();
    cov.clone().cholesky().or_else(|| (cov + DMatrix::identity(m, m) * COV_FLOOR).cholesky()).unwrap_or_else(|| {
        DMatrix::<f64>::identity(m, m).scale(COV_FLOOR).cholesky().expect("positive multiple of the identity")
    })
}

/// `[t][k]` Gaussian log densities.
fn log_emissions(model: &HmmModel, y: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let m = model.dim() as f64;
    let parts: Vec<(Cholesky<f64, Dyn>, f64)> = model
        .covs
        .iter()
        .map(|c| {
            let chol = factor(c);
            let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            (chol, log_det)
        })
        .collect();
    y.iter()
        .map(|obs| {
            DVector::from_iterator(
                model.k(),
                parts.iter().zip(&model.means).map(|((chol, log_det), mu)| {
                    let d = obs - mu;
                    -0.5 * (m * LN_2PI + log_det + d.dot(&chol.solve(&d)))
                }),
            )
        })
        .collect()
}

/// Forward-backward with per-date normalization. Emissions are rescaled by
/// their per-date maximum, so the log-likelihood accumulates both the
/// normalizers and the maxima.
pub fn forward_backward(model: &HmmModel, y: &[DVector<f64>]) -> Result<Smoothed, HmmError> {
    if let Some(obs) = y.iter().find(|v| v.len() != model.dim()) {
        return Err(HmmError::Dimension(format!(
            "observation of length {} for a {}-dim model",
            obs.len(),
            model.dim()
        )));
    }
    let n = y.len();
    let k = model.k();
    let logb = log_emissions(model, y);
    let mut loglik = 0.0;
    let mut emis = Vec::with_capacity(n);
    let mut alpha: Vec<DVector<f64>> = Vec::with_capacity(n);
    let mut scale = Vec::with_capacity(n);
    for t in 0..n {
        let peak = logb[t].max();
        let e = logb[t].map(|v| (v - peak).exp());
        let prior = if t == 0 { model.init.clone() } else { model.trans.tr_mul(&alpha[t - 1]) };
        let a = prior.component_mul(&e);
        let c = a.sum();
        if !(c > 0.0 && c.is_finite()) {
            return Err(HmmError::ZeroLikelihood(t));
        }
        loglik += c.ln() + peak;
        alpha.push(a / c);
        scale.push(c);
        emis.push(e);
    }
    let mut beta = vec![DVector::from_element(k, 1.0); n];
    for t in (0..n.saturating_sub(1)).rev() {
        let next = emis[t + 1].component_mul(&beta[t + 1]) / scale[t + 1];
        beta[t] = &model.trans * next;
    }
    let gamma: Vec<DVector<f64>> = alpha
        .iter()
        .zip(&beta)
        .map(|(a, b)| {
            let g = a.component_mul(b);
            let s = g.sum();
            g / s
        })
        .collect();
    let mut transitions = DMatrix::zeros(k, k);
    for t in 0..n.saturating_sub(1) {
        let next = emis[t + 1].component_mul(&beta[t + 1]) / scale[t + 1];
        for i in 0..k {
            for j in 0..k {
                transitions[(i, j)] += alpha[t][i] * model.trans[(i, j)] * next[j];
            }
        }
    }
    Ok(Smoothed { loglik, gamma, transitions })
}

/// Raises eigenvalues below `COV_FLOOR` to it; other matrices are returned
/// unchanged.
fn floor_eigenvalues(c: DMatrix<f64>) -> DMatrix<f64> {
    let eig = c.clone().symmetric_eigen();
    if eig.eigenvalues.min() >= COV_FLOOR {
        return c;
    }
    let vals = eig.eigenvalues.map(|v| v.max(COV_FLOOR));
    let out = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    (&out + out.transpose()) * 0.5
}

/// Baum-Welch re-estimation. Returns the new model and the states whose
/// covariance was floored.
fn m_step(model: &HmmModel, y: &[DVector<f64>], s: &Smoothed, kind: CovarianceKind) -> (HmmModel, Vec<usize>) {
    let k = model.k();
    let m = model.dim();
    let mut degenerate = Vec::new();
    let mut trans = model.trans.clone();
    for i in 0..k {
        let row = s.transitions.row(i).sum();
        if row > 0.0 {
            for j in 0..k {
                trans[(i, j)] = s.transitions[(i, j)] / row;
            }
        }
    }
    let mut means = Vec::with_capacity(k);
    let mut covs = Vec::with_capacity(k);
    for j in 0..k {
        let w: f64 = s.gamma.iter().map(|g| g[j]).sum();
        if w < MIN_STATE_WEIGHT {
            degenerate.push(j);
        }
        let mean = if w > 0.0 {
            y.iter().zip(&s.gamma).fold(DVector::zeros(m), |acc, (v, g)| acc + v * g[j]) / w
        } else {
            model.means[j].clone()
        };
        let mut c = DMatrix::zeros(m, m);
        if w > 0.0 {
            for (v, g) in y.iter().zip(&s.gamma) {
                let d = v - &mean;
                c.ger(g[j] / w, &d, &d, 1.0);
            }
        }
        let c = (&c + c.transpose()) * 0.5;
        let c = match kind {
            CovarianceKind::Full => c,
            CovarianceKind::Diagonal => DMatrix::from_diagonal(&c.diagonal()),
        };
        let cov = floor_eigenvalues(c);
        means.push(mean);
        covs.push(cov);
    }
    let init = s.gamma[0].clone();
    (HmmModel { means, covs, trans, init }, degenerate)
}

struct EmRun {
    model: HmmModel,
    loglik: f64,
    iterations: usize,
    converged: bool,
    path: Vec<f64>,
    degenerate: Vec<usize>,
}

fn run_em(start: HmmModel, y: &[DVector<f64>], cfg: &FitConfig) -> Result<EmRun, HmmError> {
    let mut model = start;
    let mut path: Vec<f64> = Vec::new();
    let mut degenerate = Vec::new();
    for it in 0..cfg.max_iter {
        let s = forward_backward(&model, y)?;
        if let Some(&prev) = path.last() {
            if (s.loglik - prev).abs() <= cfg.tol * s.loglik.abs().max(1.0) {
                path.push(s.loglik);
                return Ok(EmRun { model, loglik: s.loglik, iterations: it, converged: true, path, degenerate });
            }
        }
        path.push(s.loglik);
        (model, degenerate) = m_step(&model, y, &s, cfg.covariance);
    }
    let loglik = forward_backward(&model, y)?.loglik;
    path.push(loglik);
    Ok(EmRun { model, loglik, iterations: cfg.max_iter, converged: false, path, degenerate })
}

/// k-means++ seeding followed by Lloyd iterations.
fn kmeans(y: &[DVector<f64>], k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let n = y.len();
    let mut centres = vec![y[rng.random_range(0..n)].clone()];
    while centres.len() < k {
        let d2: Vec<f64> =
            y.iter().map(|v| centres.iter().map(|c| (v - c).norm_squared()).fold(f64::INFINITY, f64::min)).collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random_range(0.0..total);
            d2.iter()
                .position(|d| {
                    u -= d;
                    u < 0.0
                })
                .unwrap_or(n - 1)
        } else {
            rng.random_range(0..n)
        };
        centres.push(y[pick].clone());
    }
    let mut labels = vec![0; n];
    for _ in 0..KMEANS_ITERS {
        let mut moved = false;
        for (t, v) in y.iter().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| (v - &centres[a]).norm_squared().total_cmp(&(v - &centres[b]).norm_squared()))
                .expect("k >= 1");
            moved |= best != labels[t];
            labels[t] = best;
        }
        for (j, c) in centres.iter_mut().enumerate() {
            let members: Vec<&DVector<f64>> = y.iter().zip(&labels).filter(|(_, l)| **l == j).map(|(v, _)| v).collect();
            if !members.is_empty() {
                *c = members.iter().fold(DVector::zeros(c.len()), |acc, v| acc + *v) / members.len() as f64;
            }
        }
        if !moved {
            break;
        }
    }
    labels
}

/// Starting model from hard cluster labels: cluster moments, a persistent
/// transition matrix, and a uniform initial distribution.
fn initial_model(y: &[DVector<f64>], labels: &[usize], k: usize, kind: CovarianceKind) -> HmmModel {
    let n = y.len() as f64;
    let stay = if k == 1 { 1.0 } else { 0.9 };
    let trans = DMatrix::from_fn(k, k, |i, j| if i == j { stay } else { (1.0 - stay) / (k - 1) as f64 });
    let gamma: Vec<DVector<f64>> =
        labels.iter().map(|&l| DVector::from_fn(k, |j, _| if j == l { 1.0 } else { 0.0 })).collect();
    let s = Smoothed { loglik: 0.0, gamma, transitions: trans.clone() * n };
    let uniform = HmmModel {
        means: vec![y.iter().fold(DVector::zeros(y[0].len()), |a, v| a + v) / n; k],
        covs: vec![DMatrix::identity(y[0].len(), y[0].len()); k],
        trans,
        init: DVector::from_element(k, 1.0 / k as f64),
    };
    let (mut model, _) = m_step(&uniform, y, &s, kind);
    model.init = uniform.init;
    model
}

/// Fits a `cfg.k`-state Gaussian HMM by EM from `cfg.restarts` k-means
/// seeded starts. Runs where no state collapsed are preferred, since the
/// likelihood is unbounded along a collapse; among those the highest
/// log-likelihood wins, ties going to the earlier restart. Rows with
/// non-finite entries are dropped.
pub fn fit_hmm(y: &[DVector<f64>], cfg: &FitConfig) -> Result<HmmFit, HmmError> {
    if cfg.k == 0 {
        return Err(HmmError::InvalidModel("need at least one state".into()));
    }
    let kept: Vec<usize> = (0..y.len()).filter(|&t| y[t].iter().all(|v| v.is_finite())).collect();
    if kept.len() < y.len() {
        log::warn!("dropping {} rows with missing values", y.len() - kept.len());
    }
    let rows: Vec<DVector<f64>> = kept.iter().map(|&t| y[t].clone()).collect();
    if rows.len() <= 10 * cfg.k {
        return Err(HmmError::TooFewObservations { needed: 10 * cfg.k, got: rows.len() });
    }
    if rows.iter().any(|v| v.len() != rows[0].len()) {
        return Err(HmmError::Dimension("rows have different lengths".into()));
    }
    let runs: Vec<Result<EmRun, HmmError>> = (0..cfg.restarts.max(1))
        .into_par_iter()
        .map(|r| {
            let labels = kmeans(&rows, cfg.k, &mut stream_rng(cfg.seed, r as u64));
            run_em(initial_model(&rows, &labels, cfg.k, cfg.covariance), &rows, cfg)
        })
        .collect();
    let restart_logliks: Vec<Option<f64>> = runs.iter().map(|r| r.as_ref().ok().map(|e| e.loglik)).collect();
    let mut best: Option<&EmRun> = None;
    for run in runs.iter().flatten() {
        let better = best.is_none_or(|b| {
            (run.degenerate.is_empty(), run.loglik).partial_cmp(&(b.degenerate.is_empty(), b.loglik))
                == Some(std::cmp::Ordering::Greater)
        });
        if better {
            best = Some(run);
        }
    }
    let best = best.ok_or(HmmError::AllRestartsFailed(runs.len()))?;
    if !best.converged {
        log::warn!("EM stopped after {} iterations without meeting the tolerance", best.iterations);
    }
    let order = best.model.level_order();
    let degenerate: Vec<usize> = (0..cfg.k).filter(|&i| best.degenerate.contains(&order[i])).collect();
    for s in &degenerate {
        log::warn!("state {s} has fewer than two effective observations; covariance eigenvalues floored");
    }
    Ok(HmmFit {
        model: best.model.permuted(&order),
        loglik: best.loglik,
        iterations: best.iterations,
        converged: best.converged,
        loglik_path: best.path.clone(),
        degenerate,
        restart_logliks,
        kept,
    })
}
