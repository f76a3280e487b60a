//! Scaled unscented Kalman filter with state-dependent transition noise and
//! missing-data handling.

use nalgebra::{DMatrix, DVector};
use rsgcir_core::linalg::{psd_factor, symmetrize};

use crate::FilterError;

pub const JITTER: f64 = 1e-10;
/// Most negative eigenvalue tolerated before a covariance is rejected.
pub const PSD_TOL: f64 = 1e-10;
const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Gaussian state belief.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self, FilterError> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(FilterError::Dimension(format!("mean {} vs cov {}x{}", mean.len(), cov.nrows(), cov.ncols())));
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(FilterError::NonFinite);
        }
        let cov = symmetrize(&cov);
        let min_eig = cov.clone().symmetric_eigen().eigenvalues.min();
        if min_eig < -PSD_TOL * cov.amax().max(1.0) {
            return Err(FilterError::NotPositiveSemidefinite(min_eig));
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Scaled unscented transform settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UtParams {
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
}

impl Default for UtParams {
    fn default() -> Self {
        Self { alpha: 0.1, beta: 2.0, kappa: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SigmaSet {
    pub points: Vec<DVector<f64>>,
    pub mean_weights: Vec<f64>,
    pub cov_weights: Vec<f64>,
}

/// Square-root factor `L` with `L L^T = cov`: Cholesky when it succeeds, a
/// symmetric eigen factor for singular PSD matrices (so a point mass keeps
/// every sigma point at the mean), and a Cholesky retry with `JITTER * I`
/// for slightly indefinite ones.
pub fn covariance_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>, FilterError> {
    if let Some(c) = cov.clone().cholesky() {
        return Ok(c.l());
    }
    let min_eig = symmetrize(cov).symmetric_eigen().eigenvalues.min();
    if min_eig >= -PSD_TOL * cov.amax().max(1.0) {
        return Ok(psd_factor(cov));
    }
    let n = cov.nrows();
    (cov + DMatrix::identity(n, n) * JITTER).cholesky().map(|c| c.l()).ok_or(FilterError::CholeskyFailure(min_eig))
}

pub fn sigma_points(b: &GaussianBelief, ut: &UtParams) -> Result<SigmaSet, FilterError> {
    let d = b.dim();
    let df = d as f64;
    let lambda = ut.alpha * ut.alpha * (df + ut.kappa) - df;
    let scale = df + lambda;
    let root = covariance_factor(&(&b.cov * scale))?;
    let mut points = Vec::with_capacity(2 * d + 1);
    points.push(b.mean.clone());
    for j in 0..d {
        points.push(&b.mean + root.column(j));
    }
    for j in 0..d {
        points.push(&b.mean - root.column(j));
    }
    let w = 1.0 / (2.0 * scale);
    let mut mean_weights = vec![w; 2 * d + 1];
    let mut cov_weights = vec![w; 2 * d + 1];
    mean_weights[0] = lambda / scale;
    cov_weights[0] = lambda / scale + (1.0 - ut.alpha * ut.alpha + ut.beta);
    Ok(SigmaSet { points, mean_weights, cov_weights })
}

/// One-step conditional moments of the latent state.
pub trait Transition {
    fn mean(&self, x: &DVector<f64>) -> DVector<f64>;
    /// Conditional covariance; must be affine in `x` so that its value at
    /// the prior mean is its prior expectation.
    fn cov(&self, x: &DVector<f64>) -> DMatrix<f64>;
}

/// Observation map without noise.
pub trait Measurement {
    fn dim(&self) -> usize;
    fn observe(&self, x: &DVector<f64>) -> DVector<f64>;
}

/// Prediction by the unscented transform of the conditional mean plus the
/// expected conditional covariance.
pub fn predict(b: &GaussianBelief, f: &impl Transition, ut: &UtParams) -> Result<GaussianBelief, FilterError> {
    let s = sigma_points(b, ut)?;
    let mapped: Vec<DVector<f64>> = s.points.iter().map(|p| f.mean(p)).collect();
    let (mean, spread) = weighted_moments(&mapped, &s);
    let cov = symmetrize(&(spread + f.cov(&b.mean)));
    Ok(GaussianBelief { mean, cov })
}

fn weighted_moments(points: &[DVector<f64>], s: &SigmaSet) -> (DVector<f64>, DMatrix<f64>) {
    let n = points[0].len();
    let mut mean = DVector::zeros(n);
    for (p, w) in points.iter().zip(&s.mean_weights) {
        mean.axpy(*w, p, 1.0);
    }
    let mut cov = DMatrix::zeros(n, n);
    for (p, w) in points.iter().zip(&s.cov_weights) {
        let d = p - &mean;
        cov.ger(*w, &d, &d, 1.0);
    }
    (mean, cov)
}

/// Result of a measurement update.
#[derive(Debug, Clone, PartialEq)]
pub struct Update {
    pub posterior: GaussianBelief,
    /// Gaussian log predictive density of the observed entries; 0 if none.
    pub loglik: f64,
    pub innovation: DVector<f64>,
    pub innovation_cov: DMatrix<f64>,
    /// Indices of the observed entries of `y`.
    pub observed: Vec<usize>,
}

/// Measurement update with sigma points redrawn from the predicted moments.
/// Missing entries of `y` are dropped from the innovation and its covariance.
pub fn update(
    pred: &GaussianBelief,
    y: &[Option<f64>],
    h: &impl Measurement,
    noise_cov: &DMatrix<f64>,
    ut: &UtParams,
) -> Result<Update, FilterError> {
    if y.len() != h.dim() || noise_cov.nrows() != h.dim() {
        return Err(FilterError::Dimension(format!("{} observations for a {}-dim measurement", y.len(), h.dim())));
    }
    let observed: Vec<usize> = (0..y.len()).filter(|&i| y[i].is_some()).collect();
    if observed.is_empty() {
        return Ok(Update {
            posterior: pred.clone(),
            loglik: 0.0,
            innovation: DVector::zeros(0),
            innovation_cov: DMatrix::zeros(0, 0),
            observed,
        });
    }
    let s = sigma_points(pred, ut)?;
    let m = observed.len();
    let mapped: Vec<DVector<f64>> = s
        .points
        .iter()
        .map(|p| {
            let full = h.observe(p);
            DVector::from_iterator(m, observed.iter().map(|&i| full[i]))
        })
        .collect();
    let (y_hat, mut s_cov) = weighted_moments(&mapped, &s);
    for (a, &i) in observed.iter().enumerate() {
        for (b, &j) in observed.iter().enumerate() {
            s_cov[(a, b)] += noise_cov[(i, j)];
        }
    }
    let s_cov = symmetrize(&s_cov);
    let mut cross = DMatrix::zeros(pred.dim(), m);
    for ((p, z), w) in s.points.iter().zip(&mapped).zip(&s.cov_weights) {
        cross.ger(*w, &(p - &pred.mean), &(z - &y_hat), 1.0);
    }
    let obs = DVector::from_iterator(m, observed.iter().map(|&i| y[i].expect("observed")));
    let innovation = obs - &y_hat;
    let chol = s_cov
        .clone()
        .cholesky()
        .or_else(|| (&s_cov + DMatrix::identity(m, m) * JITTER).cholesky())
        .ok_or(FilterError::SingularInnovationCov)?;
    let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let solved = chol.solve(&innovation);
    let loglik = -0.5 * (m as f64 * LN_2PI + log_det + innovation.dot(&solved));
    let gain = chol.solve(&cross.transpose()).transpose();
    let mean = &pred.mean + &gain * &innovation;
    let cov = symmetrize(&(&pred.cov - &gain * &s_cov * gain.transpose()));
    if !loglik.is_finite() || mean.iter().any(|v| !v.is_finite()) {
        return Err(FilterError::NonFinite);
    }
    Ok(Update { posterior: GaussianBelief { mean, cov }, loglik, innovation, innovation_cov: s_cov, observed })
}

/// One predict-update cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct UkfStep {
    pub predicted: GaussianBelief,
    pub update: Update,
}

pub fn ukf_step(
    prior: &GaussianBelief,
    y: &[Option<f64>],
    f: &impl Transition,
    h: &impl Measurement,
    noise_cov: &DMatrix<f64>,
    ut: &UtParams,
) -> Result<UkfStep, FilterError> {
    let predicted = predict(prior, f, ut)?;
    let update = update(&predicted, y, h, noise_cov, ut)?;
    Ok(UkfStep { predicted, update })
}

/// Linear-Gaussian transition `x' = F x + c + e`, `e ~ N(0, Q)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearTransition {
    pub f: DMatrix<f64>,
    pub c: DVector<f64>,
    pub q: DMatrix<f64>,
}

impl Transition for LinearTransition {
    fn mean(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.f * x + &self.c
    }

    fn cov(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.q.clone()
    }
}

/// Affine measurement `y = H x + d`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMeasurement {
    pub h: DMatrix<f64>,
    pub d: DVector<f64>,
}

impl Measurement for AffineMeasurement {
    fn dim(&self) -> usize {
        self.h.nrows()
    }

    fn observe(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.h * x + &self.d
    }
}

/// Mixture mean and covariance of regime-conditional beliefs, including the
/// spread of the means.
pub fn gray_collapse(probs: &[f64], beliefs: &[GaussianBelief]) -> GaussianBelief {
    let n = beliefs[0].dim();
    let mut mean = DVector::zeros(n);
    for (p, b) in probs.iter().zip(beliefs) {
        mean.axpy(*p, &b.mean, 1.0);
    }
    let mut cov = DMatrix::zeros(n, n);
    for (p, b) in probs.iter().zip(beliefs) {
        let d = &b.mean - &mean;
        cov += &b.cov * *p;
        cov.ger(*p, &d, &d, 1.0);
    }
    GaussianBelief { mean, cov: symmetrize(&cov) }
}
