//! Rating-migration inputs for credit pricing.
//!
//! The pipeline runs from migration counts to a coarse one-year matrix under
//! the physical measure, then to a risk-neutral matrix whose default column
//! matches spread-implied default probabilities. That matrix is embedded as a
//! continuous-time generator, the default intensities can be shifted, and the
//! loss-adjusted non-default block is decomposed into survival modes.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::linalg::{expm, logm, real_eigen, LinalgError};
use crate::optim::{nelder_mead, NelderMeadConfig};

/// Coarse rating buckets; the last one is default.
pub const COARSE_BUCKETS: [&str; 6] = ["AAA", "AA+", "AA", "AA-", "SG", "D"];

/// Weights in `[-WEIGHT_CLIP_TOL, 0)` are treated as rounding noise.
pub const WEIGHT_CLIP_TOL: f64 = 1e-10;

/// Bounds of the logit map used when calibrating default probabilities.
pub const PI_EPS: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RatingError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("rating {0} has no outgoing observations")]
    EmptyRow(String),
    #[error("bucket {0} has no observations")]
    EmptyBucket(String),
    #[error("row {0} already defaults with probability one")]
    DegenerateRow(usize),
    #[error("default-probability calibration failed: {0}")]
    OptimizerFailure(String),
    #[error("negative default-intensity adjustment at rating {0}")]
    NegativeDeltaNu(usize),
    #[error("mode weight w[{row}][{mode}] = {value} is materially negative")]
    NegativeWeight { row: usize, mode: usize, value: f64 },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RatingMeasure {
    Physical,
    RiskNeutral,
}

/// Obligor migration counts on a fine notch scale with a map to coarse buckets.
#[derive(Debug, Clone, PartialEq)]
pub struct MigrationCounts {
    pub counts: DMatrix<f64>,
    pub fine_labels: Vec<String>,
    /// Coarse bucket index for each fine label; `coarse_labels.len() - 1` is default.
    pub bucket_of: Vec<usize>,
    pub coarse_labels: Vec<String>,
}

impl MigrationCounts {
    pub fn new(
        counts: DMatrix<f64>,
        fine_labels: Vec<String>,
        bucket_of: Vec<usize>,
        coarse_labels: Vec<String>,
    ) -> Result<Self, RatingError> {
        let n = fine_labels.len();
        if counts.nrows() != n || counts.ncols() != n || bucket_of.len() != n {
            return Err(RatingError::Invalid("count matrix and label sizes differ".into()));
        }
        if coarse_labels.len() < 2 {
            return Err(RatingError::Invalid("need at least one rating plus default".into()));
        }
        if bucket_of.iter().any(|&b| b >= coarse_labels.len()) {
            return Err(RatingError::Invalid("bucket index out of range".into()));
        }
        if counts.iter().any(|&c| !(c >= 0.0) || c.fract() != 0.0) {
            return Err(RatingError::Invalid("counts must be nonnegative integers".into()));
        }
        Ok(Self { counts, fine_labels, bucket_of, coarse_labels })
    }

    fn default_bucket(&self) -> usize {
        self.coarse_labels.len() - 1
    }

    fn is_default(&self, fine: usize) -> bool {
        self.bucket_of[fine] == self.default_bucket()
    }
}

/// One-year rating transition matrix with an absorbing default state last.
#[derive(Debug, Clone, PartialEq)]
pub struct RatingTransition {
    pub p: DMatrix<f64>,
    pub measure: RatingMeasure,
    pub labels: Vec<String>,
}

impl RatingTransition {
    /// Strict constructor: entries in `[0, 1]`, rows summing to one within
    /// `1e-12`, and an absorbing last row.
    pub fn new(p: DMatrix<f64>, measure: RatingMeasure, labels: Vec<String>) -> Result<Self, RatingError> {
        let k = p.nrows();
        if k < 2 || p.ncols() != k || labels.len() != k {
            return Err(RatingError::Invalid("transition matrix shape".into()));
        }
        if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(RatingError::Invalid("entries must lie in [0, 1]".into()));
        }
        for i in 0..k {
            let s = p.row(i).sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(RatingError::Invalid(format!("row {i} sums to {s}")));
            }
        }
        if p[(k - 1, k - 1)] != 1.0 {
            return Err(RatingError::Invalid("default row must be absorbing".into()));
        }
        Ok(Self { p, measure, labels })
    }

    /// Accepts a matrix whose rows sum to one only up to published rounding,
    /// rescaling each row before validation.
    pub fn from_rounded(mut p: DMatrix<f64>, measure: RatingMeasure, labels: Vec<String>) -> Result<Self, RatingError> {
        for i in 0..p.nrows() {
            let s = p.row(i).sum();
            if !(s > 0.0) {
                return Err(RatingError::Invalid(format!("row {i} has no mass")));
            }
            p.row_mut(i).iter_mut().for_each(|v| *v /= s);
        }
        Self::new(p, measure, labels)
    }

    pub fn size(&self) -> usize {
        self.p.nrows()
    }

    pub fn default_probs(&self) -> DVector<f64> {
        let k = self.size();
        DVector::from_iterator(k - 1, (0..k - 1).map(|i| self.p[(i, k - 1)]))
    }
}

/// Fine-notch one-year probabilities `N_ij / N_i`; default rows are absorbing.
pub fn fine_transition_probs(c: &MigrationCounts) -> Result<DMatrix<f64>, RatingError> {
    let n = c.fine_labels.len();
    let mut p = DMatrix::zeros(n, n);
    for i in 0..n {
        if c.is_default(i) {
            p[(i, i)] = 1.0;
            continue;
        }
        let total: f64 = c.counts.row(i).sum();
        if total <= 0.0 {
            return Err(RatingError::EmptyRow(c.fine_labels[i].clone()));
        }
        for j in 0..n {
            p[(i, j)] = c.counts[(i, j)] / total;
        }
    }
    Ok(p)
}

/// Pools fine transitions by origin and destination bucket.
pub fn aggregate_to_coarse(c: &MigrationCounts) -> Result<RatingTransition, RatingError> {
    let k = c.coarse_labels.len();
    let n = c.fine_labels.len();
    let mut pooled = DMatrix::<f64>::zeros(k, k);
    for i in 0..n {
        if c.is_default(i) {
            continue;
        }
        for j in 0..n {
            pooled[(c.bucket_of[i], c.bucket_of[j])] += c.counts[(i, j)];
        }
    }
    let default = k - 1;
    for bucket in 0..default {
        let total: f64 = pooled.row(bucket).sum();
        if total <= 0.0 {
            return Err(RatingError::EmptyBucket(c.coarse_labels[bucket].clone()));
        }
        pooled.row_mut(bucket).iter_mut().for_each(|v| *v /= total);
    }
    pooled.row_mut(default).fill(0.0);
    pooled[(default, default)] = 1.0;
    RatingTransition::new(pooled, RatingMeasure::Physical, c.coarse_labels.clone())
}

/// Cumulative default probability implied by a spread over horizon `horizon`
/// with fractional recovery `recovery`, truncated to `[0, 1]`.
pub fn spread_implied_default_prob(spread: f64, horizon: f64, recovery: f64) -> f64 {
    assert!(recovery < 1.0, "recovery must be below one");
    assert!(horizon > 0.0, "horizon must be positive");
    (-(-spread * horizon).exp_m1() / (1.0 - recovery)).clamp(0.0, 1.0)
}

/// Replaces each row's default probability by `pi[i]` and rescales the
/// non-default entries so the row still sums to one.
pub fn risk_neutral_distortion(pp: &RatingTransition, pi: &[f64]) -> Result<RatingTransition, RatingError> {
    let k = pp.size();
    let d = k - 1;
    if pi.len() != d {
        return Err(RatingError::Invalid(format!("expected {d} default probabilities")));
    }
    let mut q = pp.p.clone();
    for i in 0..d {
        if !(pi[i] > 0.0 && pi[i] < 1.0) {
            return Err(RatingError::Invalid(format!("pi[{i}] = {} outside (0, 1)", pi[i])));
        }
        let pd = pp.p[(i, d)];
        if pd >= 1.0 {
            return Err(RatingError::DegenerateRow(i));
        }
        let scale = (1.0 - pi[i]) / (1.0 - pd);
        for j in 0..d {
            q[(i, j)] = pp.p[(i, j)] * scale;
        }
        q[(i, d)] = pi[i];
        let s = q.row(i).sum();
        q.row_mut(i).iter_mut().for_each(|v| *v /= s);
    }
    RatingTransition::new(q, RatingMeasure::RiskNeutral, pp.labels.clone())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationOptions {
    pub restarts: usize,
    pub seed: u64,
    pub optimizer: NelderMeadConfig,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            restarts: 3,
            seed: 0x5eed,
            optimizer: NelderMeadConfig { max_evals: 40_000, f_tol: 1e-22, x_tol: 1e-11, initial_step: 0.5 },
        }
    }
}

fn to_prob(z: f64) -> f64 {
    PI_EPS + (1.0 - 2.0 * PI_EPS) / (1.0 + (-z).exp())
}

fn to_logit(p: f64) -> f64 {
    let u = ((p - PI_EPS) / (1.0 - 2.0 * PI_EPS)).clamp(1e-15, 1.0 - 1e-15);
    (u / (1.0 - u)).ln()
}

/// Weighted squared distance between model cumulative default probabilities
/// `[(P^Q)^t]_iD` and targets, over horizons `t = 1..=t_max`.
pub fn calibration_objective(
    pp: &RatingTransition,
    pi: &[f64],
    q_imp: &DMatrix<f64>,
    weights: &DMatrix<f64>,
    t_max: usize,
) -> Result<f64, RatingError> {
    let pq = risk_neutral_distortion(pp, pi)?;
    let d = pp.size() - 1;
    let mut power = pq.p.clone();
    let mut total = 0.0;
    for t in 0..t_max {
        if t > 0 {
            power = &power * &pq.p;
        }
        for i in 0..d {
            let w = weights[(i, t)];
            if w > 0.0 {
                total += w * (power[(i, d)] - q_imp[(i, t)]).powi(2);
            }
        }
    }
    Ok(total)
}

/// Calibrates risk-neutral one-year default probabilities with default options.
pub fn calibrate_pi(
    pp: &RatingTransition,
    q_imp: &DMatrix<f64>,
    weights: &DMatrix<f64>,
    t_max: usize,
) -> Result<Vec<f64>, RatingError> {
    calibrate_pi_with(pp, q_imp, weights, t_max, &CalibrationOptions::default())
}

pub fn calibrate_pi_with(
    pp: &RatingTransition,
    q_imp: &DMatrix<f64>,
    weights: &DMatrix<f64>,
    t_max: usize,
    opts: &CalibrationOptions,
) -> Result<Vec<f64>, RatingError> {
    let d = pp.size() - 1;
    if t_max == 0 || q_imp.nrows() != d || weights.nrows() != d {
        return Err(RatingError::Invalid("target matrices must have one row per rating".into()));
    }
    if q_imp.ncols() < t_max || weights.ncols() < t_max {
        return Err(RatingError::Invalid("targets do not cover the horizon grid".into()));
    }
    if q_imp.iter().any(|v| !(0.0..=1.0).contains(v)) || weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(RatingError::Invalid("targets must be probabilities, weights nonnegative".into()));
    }
    let start: Vec<f64> = pp.default_probs().iter().map(|p| p.clamp(PI_EPS, 1.0 - PI_EPS)).collect();
    if t_max == 1 {
        // The one-year matrix is P^Q itself, so each row decouples.
        return Ok((0..d)
            .map(|i| if weights[(i, 0)] > 0.0 { q_imp[(i, 0)].clamp(PI_EPS, 1.0 - PI_EPS) } else { start[i] })
            .collect());
    }
    let objective = |z: &[f64]| {
        let pi: Vec<f64> = z.iter().map(|&v| to_prob(v)).collect();
        calibration_objective(pp, &pi, q_imp, weights, t_max).unwrap_or(f64::INFINITY)
    };
    let z0: Vec<f64> = start.iter().map(|&p| to_logit(p)).collect();
    let f0 = objective(&z0);
    let mut best = nelder_mead(objective, &z0, &opts.optimizer);
    let mut rng = ChaCha20Rng::seed_from_u64(opts.seed);
    for _ in 0..opts.restarts {
        let from: Vec<f64> = best
            .x
            .iter()
            .map(|v| {
                let kick: f64 = StandardNormal.sample(&mut rng);
                v + 0.5 * kick
            })
            .collect();
        let trial = nelder_mead(objective, &from, &opts.optimizer);
        if trial.f < best.f {
            best = trial;
        }
    }
    if !best.f.is_finite() {
        return Err(RatingError::OptimizerFailure("objective is not finite".into()));
    }
    if best.f > f0 {
        return Ok(start);
    }
    Ok(best.x.iter().map(|&v| to_prob(v)).collect())
}

/// Continuous-time rating generator split into the migration block `Λ`
/// (rows summing to zero) and the default-intensity vector `ν`.
#[derive(Debug, Clone, PartialEq)]
pub struct RatingGenerator {
    pub lambda_block: DMatrix<f64>,
    pub nu: DVector<f64>,
    pub labels: Vec<String>,
}

impl RatingGenerator {
    pub fn new(lambda_block: DMatrix<f64>, nu: DVector<f64>, labels: Vec<String>) -> Result<Self, RatingError> {
        let d = nu.len();
        if lambda_block.nrows() != d || lambda_block.ncols() != d || labels.len() != d + 1 {
            return Err(RatingError::Invalid("generator shape".into()));
        }
        if nu.iter().any(|v| !(*v >= 0.0)) {
            return Err(RatingError::Invalid("default intensities must be nonnegative".into()));
        }
        let scale = lambda_block.amax().max(1.0);
        for i in 0..d {
            for j in 0..d {
                if i != j && !(lambda_block[(i, j)] >= 0.0) {
                    return Err(RatingError::Invalid(format!("negative migration rate ({i},{j})")));
                }
            }
            if lambda_block.row(i).sum().abs() > 1e-10 * scale {
                return Err(RatingError::Invalid(format!("migration row {i} does not sum to 0")));
            }
        }
        Ok(Self { lambda_block, nu, labels })
    }

    pub fn n_ratings(&self) -> usize {
        self.nu.len()
    }

    /// Loss-adjusted non-default block `Λ - diag(ν)`.
    pub fn loss_adjusted_block(&self) -> DMatrix<f64> {
        &self.lambda_block - DMatrix::from_diagonal(&self.nu)
    }

    /// Full generator with the default state last.
    pub fn full_generator(&self) -> DMatrix<f64> {
        let d = self.n_ratings();
        let mut q = DMatrix::zeros(d + 1, d + 1);
        q.view_mut((0, 0), (d, d)).copy_from(&self.loss_adjusted_block());
        for i in 0..d {
            q[(i, d)] = self.nu[i];
        }
        q
    }
}

/// Principal log of a one-year matrix, projected onto valid generators by
/// zeroing negative off-diagonals and resetting diagonals.
pub fn embed_generator(pq: &RatingTransition) -> Result<RatingGenerator, RatingError> {
    let k = pq.size();
    if (0..k).any(|i| pq.p[(i, i)] <= 0.0) {
        return Err(RatingError::Invalid("diagonal must be strictly positive".into()));
    }
    let raw = logm(&pq.p)?;
    let d = k - 1;
    let mut lambda_block = DMatrix::<f64>::zeros(d, d);
    let mut nu = DVector::<f64>::zeros(d);
    for i in 0..d {
        for j in 0..d {
            if i != j {
                lambda_block[(i, j)] = raw[(i, j)].max(0.0);
            }
        }
        let s: f64 = lambda_block.row(i).sum();
        lambda_block[(i, i)] = -s;
        nu[i] = raw[(i, d)].max(0.0);
    }
    let g = RatingGenerator::new(lambda_block, nu, pq.labels.clone())?;
    log::info!("generator embedding reconstruction error {:.3e}", embedding_error(&g, pq)?);
    Ok(g)
}

/// Max-abs entry of `exp(Q) - P^Q`.
pub fn embedding_error(g: &RatingGenerator, pq: &RatingTransition) -> Result<f64, RatingError> {
    Ok((expm(&g.full_generator())? - &pq.p).amax())
}

/// Adds `delta_nu` to the default intensities; migration rates are untouched.
pub fn adjust_default_intensity(g: &RatingGenerator, delta_nu: &[f64]) -> Result<RatingGenerator, RatingError> {
    if delta_nu.len() != g.n_ratings() {
        return Err(RatingError::Invalid("adjustment length".into()));
    }
    if let Some(i) = delta_nu.iter().position(|v| !(*v >= 0.0)) {
        return Err(RatingError::NegativeDeltaNu(i));
    }
    let mut out = g.clone();
    for (v, dv) in out.nu.iter_mut().zip(delta_nu) {
        *v += dv;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightPolicy {
    /// Any weight below `-WEIGHT_CLIP_TOL` is an error.
    NonNegative,
    /// Signed weights are kept; only rounding-level negatives are clipped.
    Signed,
}

/// Spectral decomposition of the loss-adjusted block with survival weights.
#[derive(Debug, Clone)]
pub struct LandoDecomposition {
    /// Mode eigenvalues, decreasing.
    pub modes: DVector<f64>,
    pub eigvec: DMatrix<f64>,
    pub eigvec_inv: DMatrix<f64>,
    /// Negative row sums of `eigvec_inv`.
    pub default_column: DVector<f64>,
    /// `w[i][j] = -eigvec[i][j] * default_column[j]`.
    pub weights: DMatrix<f64>,
    /// Max `|b_iK b^-1_KK - 1|` on the full-chain eigensystem.
    pub absorbing_column_residual: f64,
    /// Max-abs entry of `eigvec diag(modes) eigvec_inv - (Λ - diag(ν))`.
    pub reconstruction_error: f64,
    /// Most negative weight before clipping.
    pub min_weight: f64,
}

impl LandoDecomposition {
    /// Survival probability of rating `i` after integrated intensity scale `s`.
    pub fn survival(&self, i: usize, s: f64) -> f64 {
        (0..self.modes.len()).map(|j| self.weights[(i, j)] * (self.modes[j] * s).exp()).sum()
    }
}

pub fn lando_decomposition(g: &RatingGenerator, policy: WeightPolicy) -> Result<LandoDecomposition, RatingError> {
    let block = g.loss_adjusted_block();
    let d = block.nrows();
    let eig = real_eigen(&block)?;
    let default_column = -eig.inverse.column_sum();
    let mut weights = DMatrix::<f64>::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            weights[(i, j)] = -eig.vectors[(i, j)] * default_column[j];
        }
    }
    let min_weight = weights.min();
    for i in 0..d {
        let mut clipped = false;
        for j in 0..d {
            let w = weights[(i, j)];
            if w < 0.0 && w >= -WEIGHT_CLIP_TOL {
                weights[(i, j)] = 0.0;
                clipped = true;
            } else if w < -WEIGHT_CLIP_TOL && policy == WeightPolicy::NonNegative {
                return Err(RatingError::NegativeWeight { row: i, mode: j, value: w });
            }
        }
        if clipped {
            let s = weights.row(i).sum();
            weights.row_mut(i).iter_mut().for_each(|v| *v /= s);
        }
    }
    if min_weight < -WEIGHT_CLIP_TOL {
        log::warn!("survival mode weights are signed (min {min_weight:.4e})");
    }

    let rebuilt = &eig.vectors * DMatrix::from_diagonal(&eig.values) * &eig.inverse;
    let reconstruction_error = (rebuilt - &block).amax();

    let mut full = DMatrix::<f64>::zeros(d + 1, d + 1);
    full.view_mut((0, 0), (d, d)).copy_from(&eig.vectors);
    full.column_mut(d).fill(1.0);
    let full_inv = full.clone().try_inverse().ok_or(LinalgError::Singular)?;
    let absorbing_column_residual = (0..=d)
        .map(|i| (full[(i, d)] * full_inv[(d, d)] - 1.0).abs())
        .chain((0..d).map(|j| (full_inv[(j, d)] - default_column[j]).abs()))
        .fold(0.0, f64::max);

    Ok(LandoDecomposition {
        modes: eig.values,
        eigvec: eig.vectors,
        eigvec_inv: eig.inverse,
        default_column,
        weights,
        absorbing_column_residual,
        reconstruction_error,
        min_weight,
    })
}
