//! Regime-conditional zero-coupon bond pricing on the weekly grid.
//!
//! Four independent factors drive all curves. `X1..X3` switch with the rate
//! regime and `X4` switches with the credit regime. Sovereign curves discount
//! at an affine short rate. Corporate curves are sums of survival modes, each
//! priced with an affine kernel whose loadings depend on the joint regime.
//!
//! Prices come from a backward recursion over grid steps. A price function
//! is held per current regime as a finite sum of exponential-affine terms
//! `exp(ln_c - b'x)`. One step applies the regime's one-step transform to
//! every term of every successor regime, weighting by the transition
//! probability. Terms with (numerically) equal slopes are merged exactly;
//! past the term cap, slopes are pooled on a progressively coarser grid and
//! each pool is replaced by one term matching its value and gradient at the
//! evaluation state.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::affine::{affine_coefficients, to_risk_neutral, AffineError, GcirParams, RiskPrice};
use crate::ratings::{LandoDecomposition, RatingGenerator};
use crate::regimes::{
    joint_index, kronecker_sum, stationary_distribution, transition_matrix, CtmcGenerator, RegimeError,
};

pub const N_FACTORS: usize = 4;
pub const MU_FLOOR: f64 = 1e-8;
pub const DEFAULT_TERM_CAP: usize = 256;
/// Terms whose share of a regime's price falls below this are dropped.
pub const PRUNE_SHARE: f64 = 1e-12;
const EXACT_MERGE_GRID: f64 = 1e-9;

pub type State = [f64; N_FACTORS];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PricingError {
    #[error(transparent)]
    Affine(#[from] AffineError),
    #[error(transparent)]
    Regime(#[from] RegimeError),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("price {0} is not positive")]
    NonPositivePrice(f64),
    #[error("weights have no mass")]
    ZeroWeightMass,
    #[error("model has no rating system")]
    MissingRatingModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Curve {
    /// Sovereign curve: short rate `X1 + X2`.
    Cgb,
    /// Policy-bank curve: short rate `X1 + X2 + X3`.
    Cdb,
}

pub fn short_rate_loadings(curve: Curve) -> State {
    match curve {
        Curve::Cgb => [1.0, 1.0, 0.0, 0.0],
        Curve::Cdb => [1.0, 1.0, 1.0, 0.0],
    }
}

/// One factor's physical dynamics, its risk price, and the implied
/// risk-neutral dynamics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FactorSpec {
    pub physical: GcirParams,
    pub lambda: RiskPrice,
    pub risk_neutral: GcirParams,
}

impl FactorSpec {
    pub fn new(physical: GcirParams, lambda: RiskPrice) -> Result<Self, AffineError> {
        let risk_neutral = to_risk_neutral(&physical, lambda)?;
        Ok(Self { physical, lambda, risk_neutral })
    }
}

#[derive(Debug, Clone)]
pub struct RatingModel {
    pub generator: RatingGenerator,
    pub lando: LandoDecomposition,
}

impl RatingModel {
    pub fn n_ratings(&self) -> usize {
        self.generator.n_ratings()
    }
}

/// Full pricing model.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    /// `X1..X3` per rate regime.
    pub rate_factors: Vec<[FactorSpec; 3]>,
    /// `X4` per credit regime.
    pub credit_factors: Vec<FactorSpec>,
    pub qr: CtmcGenerator,
    pub qc: CtmcGenerator,
    /// Pass-through `c(credit | rate)`: rows are rate regimes, columns credit regimes.
    pub passthrough: DMatrix<f64>,
    pub rating: Option<RatingModel>,
    pub grid_delta: f64,
}

impl ModelSpec {
    pub fn new(
        rate_factors: Vec<[FactorSpec; 3]>,
        credit_factors: Vec<FactorSpec>,
        qr: CtmcGenerator,
        qc: CtmcGenerator,
        passthrough: DMatrix<f64>,
        rating: Option<RatingModel>,
        grid_delta: f64,
    ) -> Result<Self, PricingError> {
        if rate_factors.len() != qr.len() || credit_factors.len() != qc.len() {
            return Err(PricingError::InvalidModel("factor sets must match the regime counts".into()));
        }
        if passthrough.nrows() != qr.len() || passthrough.ncols() != qc.len() {
            return Err(PricingError::InvalidModel("pass-through shape".into()));
        }
        if !(grid_delta > 0.0) {
            return Err(PricingError::InvalidModel("grid step must be positive".into()));
        }
        Ok(Self { rate_factors, credit_factors, qr, qc, passthrough, rating, grid_delta })
    }

    pub fn n_rate(&self) -> usize {
        self.qr.len()
    }

    pub fn n_credit(&self) -> usize {
        self.qc.len()
    }

    pub fn n_joint(&self) -> usize {
        self.n_rate() * self.n_credit()
    }

    pub fn joint_generator(&self) -> CtmcGenerator {
        kronecker_sum(&self.qr, &self.qc)
    }

    /// Risk-neutral parameters of all four factors in a joint regime.
    pub fn q_params(&self, rate: usize, credit: usize) -> [GcirParams; N_FACTORS] {
        let r = &self.rate_factors[rate];
        [r[0].risk_neutral, r[1].risk_neutral, r[2].risk_neutral, self.credit_factors[credit].risk_neutral]
    }

    /// Long-run physical factor means weighted by the stationary regime
    /// distributions (uniform for reducible chains).
    pub fn reference_state(&self) -> State {
        let weights = |g: &CtmcGenerator| -> Vec<f64> {
            stationary_distribution(g)
                .map(|p| p.iter().copied().collect())
                .unwrap_or_else(|_| vec![1.0 / g.len() as f64; g.len()])
        };
        let (wr, wc) = (weights(&self.qr), weights(&self.qc));
        let mut x = [0.0; N_FACTORS];
        for (s, w) in wr.iter().enumerate() {
            for k in 0..3 {
                x[k] += w * self.rate_factors[s][k].physical.theta;
            }
        }
        for (s, w) in wc.iter().enumerate() {
            x[3] += w * self.credit_factors[s].physical.theta;
        }
        x
    }

    pub fn rating_model(&self) -> Result<&RatingModel, PricingError> {
        self.rating.as_ref().ok_or(PricingError::MissingRatingModel)
    }
}

/// Per-regime prices at one maturity.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimePriceVector {
    pub values: Vec<f64>,
    pub maturity: f64,
    pub labels: Vec<String>,
}

/// One exponential-affine term `exp(ln_c - b'x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Term {
    pub ln_c: f64,
    pub b: State,
}

impl Term {
    pub const UNIT: Term = Term { ln_c: 0.0, b: [0.0; N_FACTORS] };

    pub fn log_value(&self, x: &State) -> f64 {
        self.ln_c - dot(&self.b, x)
    }

    pub fn value(&self, x: &State) -> f64 {
        self.log_value(x).exp()
    }
}

fn dot(a: &State, b: &State) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

/// One-step transform data for one regime.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegimeKernel {
    pub params: [GcirParams; N_FACTORS],
    pub loadings: State,
}

impl RegimeKernel {
    fn step(&self, term: &Term, delta: f64) -> Result<Term, AffineError> {
        let mut out = Term { ln_c: term.ln_c, b: [0.0; N_FACTORS] };
        for k in 0..N_FACTORS {
            let (c1, c2) = (self.loadings[k], term.b[k]);
            if c1 == 0.0 && c2 == 0.0 {
                continue;
            }
            let ab = affine_coefficients(&self.params[k], c1, c2, delta)?;
            out.ln_c += ab.a;
            out.b[k] = ab.b;
        }
        Ok(out)
    }
}

/// Summed one-step discount block: `A = sum_k A_k`, `B` per factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VectorAffine {
    pub a: f64,
    pub b: State,
}

pub fn one_step_discount_block(
    m: &ModelSpec,
    curve: Curve,
    rate_regime: usize,
    delta: f64,
) -> Result<VectorAffine, PricingError> {
    let kernel = RegimeKernel { params: m.q_params(rate_regime, 0), loadings: short_rate_loadings(curve) };
    let t = kernel.step(&Term::UNIT, delta)?;
    Ok(VectorAffine { a: t.ln_c, b: t.b })
}

/// How price functions are represented during the recursion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PricingScheme {
    /// Sum of exponential-affine terms with at most `max_terms` per regime.
    Mixture { max_terms: usize },
    /// A single exponential-affine term per regime. Cheap; used inside the
    /// filters, where the collapse point is a fixed reference state.
    Collapsed,
}

impl Default for PricingScheme {
    fn default() -> Self {
        PricingScheme::Mixture { max_terms: DEFAULT_TERM_CAP }
    }
}

/// Diagnostics of the term bookkeeping.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RecursionStats {
    pub max_terms: usize,
    /// Largest pruned share of a regime's value in any single step.
    pub max_pruned_share: f64,
    /// Coarsest slope pooling grid used.
    pub max_pool_grid: f64,
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Replaces a group of terms by one term with the same value and gradient at `x`.
fn merge_group(terms: &[Term], x: &State) -> Term {
    if terms.len() == 1 {
        return terms[0];
    }
    let logs: Vec<f64> = terms.iter().map(|t| t.log_value(x)).collect();
    let total = log_sum_exp(logs.iter().copied());
    let mut b = [0.0; N_FACTORS];
    for (t, lv) in terms.iter().zip(&logs) {
        let w = (lv - total).exp();
        for k in 0..N_FACTORS {
            b[k] += w * t.b[k];
        }
    }
    Term { ln_c: total + dot(&b, x), b }
}

fn pool(terms: &mut Vec<Term>, grid: f64, x: &State) -> Vec<Term> {
    let key = |t: &Term| -> [i64; N_FACTORS] {
        let mut k = [0i64; N_FACTORS];
        for i in 0..N_FACTORS {
            k[i] = (t.b[i] / grid).round() as i64;
        }
        k
    };
    let mut keyed: Vec<([i64; N_FACTORS], Term)> = terms.drain(..).map(|t| (key(&t), t)).collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0));
    let mut out = Vec::new();
    let mut start = 0;
    while start < keyed.len() {
        let mut end = start + 1;
        while end < keyed.len() && keyed[end].0 == keyed[start].0 {
            end += 1;
        }
        let group: Vec<Term> = keyed[start..end].iter().map(|(_, t)| *t).collect();
        out.push(merge_group(&group, x));
        start = end;
    }
    out
}

fn count_pools(terms: &[Term], grid: f64) -> usize {
    let mut keys: Vec<[i64; N_FACTORS]> = terms
        .iter()
        .map(|t| {
            let mut k = [0i64; N_FACTORS];
            for i in 0..N_FACTORS {
                k[i] = (t.b[i] / grid).round() as i64;
            }
            k
        })
        .collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len()
}

struct Compactor {
    grid: f64,
    stats: RecursionStats,
}

impl Compactor {
    fn compact(&mut self, mut terms: Vec<Term>, scheme: PricingScheme, x: &State) -> Vec<Term> {
        if terms.is_empty() {
            return terms;
        }
        let cap = match scheme {
            PricingScheme::Collapsed => return vec![merge_group(&terms, x)],
            PricingScheme::Mixture { max_terms } => max_terms.max(1),
        };
        let total = log_sum_exp(terms.iter().map(|t| t.log_value(x)));
        let floor = total + PRUNE_SHARE.ln();
        let before = terms.len();
        let mut pruned = 0.0;
        terms.retain(|t| {
            let lv = t.log_value(x);
            if lv < floor {
                pruned += (lv - total).exp();
                false
            } else {
                true
            }
        });
        if terms.len() < before {
            self.stats.max_pruned_share = self.stats.max_pruned_share.max(pruned);
        }
        let mut grid = EXACT_MERGE_GRID.max(self.grid * 0.25);
        while count_pools(&terms, grid) > cap {
            grid *= 2.0;
        }
        self.grid = grid;
        self.stats.max_pool_grid = self.stats.max_pool_grid.max(grid);
        let out = pool(&mut terms, grid, x);
        self.stats.max_terms = self.stats.max_terms.max(out.len());
        out
    }
}

/// Price functions per regime at each requested step count.
#[derive(Debug, Clone)]
pub struct RecursionOutput {
    /// `functions[i][s]`: terms for `steps[i]` steps to maturity in regime `s`.
    pub functions: Vec<Vec<Vec<Term>>>,
    pub steps: Vec<usize>,
    pub stats: RecursionStats,
}

impl RecursionOutput {
    pub fn price(&self, index: usize, regime: usize, x: &State) -> f64 {
        self.functions[index][regime].iter().map(|t| t.value(x)).sum()
    }
}

/// Backward recursion `F_s(n) = sum_s' P[s][s'] * step_s(F_s'(n - 1))`
/// from `F(0) = 1`, recording the requested step counts.
pub fn backward_recursion(
    kernels: &[RegimeKernel],
    transition: &DMatrix<f64>,
    delta: f64,
    steps: &[usize],
    scheme: PricingScheme,
    x: &State,
) -> Result<RecursionOutput, PricingError> {
    let n_reg = kernels.len();
    if transition.nrows() != n_reg || transition.ncols() != n_reg {
        return Err(PricingError::DimensionMismatch("transition matrix vs kernels".into()));
    }
    let max_step = steps.iter().copied().max().unwrap_or(0);
    let mut current: Vec<Vec<Term>> = vec![vec![Term::UNIT]; n_reg];
    let mut compactor = Compactor { grid: EXACT_MERGE_GRID, stats: RecursionStats::default() };
    let mut recorded: Vec<Option<Vec<Vec<Term>>>> = vec![None; steps.len()];
    let record = |n: usize, cur: &Vec<Vec<Term>>, rec: &mut Vec<Option<Vec<Vec<Term>>>>| {
        for (i, &s) in steps.iter().enumerate() {
            if s == n {
                rec[i] = Some(cur.clone());
            }
        }
    };
    record(0, &current, &mut recorded);
    for n in 1..=max_step {
        let mut next = Vec::with_capacity(n_reg);
        for (s, kernel) in kernels.iter().enumerate() {
            let mut terms = Vec::new();
            for (succ, funcs) in current.iter().enumerate() {
                let p = transition[(s, succ)];
                if p <= 0.0 {
                    continue;
                }
                let ln_p = p.ln();
                for t in funcs {
                    let mut stepped = kernel.step(t, delta)?;
                    stepped.ln_c += ln_p;
                    terms.push(stepped);
                }
            }
            next.push(compactor.compact(terms, scheme, x));
        }
        current = next;
        record(n, &current, &mut recorded);
    }
    if compactor.stats.max_pruned_share > 0.0 {
        log::debug!(
            "term recursion pruned at most {:.3e} of value per step (pool grid {:.3e})",
            compactor.stats.max_pruned_share,
            compactor.stats.max_pool_grid
        );
    }
    Ok(RecursionOutput {
        functions: recorded.into_iter().map(|r| r.unwrap_or_default()).collect(),
        steps: steps.to_vec(),
        stats: compactor.stats,
    })
}

fn sovereign_kernels(m: &ModelSpec, curve: Curve) -> Vec<RegimeKernel> {
    (0..m.n_rate()).map(|s| RegimeKernel { params: m.q_params(s, 0), loadings: short_rate_loadings(curve) }).collect()
}

/// Runs the sovereign recursion once and evaluates every requested maturity.
pub fn discount_curve(
    m: &ModelSpec,
    curve: Curve,
    x: &State,
    steps: &[usize],
    scheme: PricingScheme,
) -> Result<Vec<RegimePriceVector>, PricingError> {
    let p = transition_matrix(&m.qr, m.grid_delta)?.p;
    let out = backward_recursion(&sovereign_kernels(m, curve), &p, m.grid_delta, steps, scheme, x)?;
    Ok(evaluate(&out, x, m.grid_delta, m.qr.labels()))
}

fn evaluate(out: &RecursionOutput, x: &State, delta: f64, labels: &[String]) -> Vec<RegimePriceVector> {
    out.steps
        .iter()
        .enumerate()
        .map(|(i, &n)| RegimePriceVector {
            values: (0..labels.len()).map(|s| out.price(i, s, x)).collect(),
            maturity: n as f64 * delta,
            labels: labels.to_vec(),
        })
        .collect()
}

/// Per-rate-regime sovereign zero-coupon prices `n` grid steps ahead.
pub fn discount_bond_prices(
    m: &ModelSpec,
    curve: Curve,
    x: &State,
    n: usize,
) -> Result<RegimePriceVector, PricingError> {
    Ok(discount_curve(m, curve, x, &[n], PricingScheme::default())?.remove(0))
}

/// Per-regime single-term coefficients collapsed at `reference`; prices are
/// then `exp(ln_c - b'x)` for any state.
pub fn sovereign_coefficients(
    m: &ModelSpec,
    curve: Curve,
    reference: &State,
    steps: &[usize],
) -> Result<Vec<Vec<Term>>, PricingError> {
    let p = transition_matrix(&m.qr, m.grid_delta)?.p;
    let out =
        backward_recursion(&sovereign_kernels(m, curve), &p, m.grid_delta, steps, PricingScheme::Collapsed, reference)?;
    Ok(out.functions.into_iter().map(|f| f.into_iter().map(|mut t| t.remove(0)).collect()).collect())
}

/// Credit-risk driver `c(credit|rate) (x1 + x2) + x4`, floored at [`MU_FLOOR`].
pub fn mu_driver(m: &ModelSpec, x: &State, rate: usize, credit: usize) -> f64 {
    (m.passthrough[(rate, credit)] * (x[0] + x[1]) + x[3]).max(MU_FLOOR)
}

/// Kernel loadings of survival mode `d` in joint regime `(rate, credit)`.
pub fn mode_loadings(m: &ModelSpec, mode_value: f64, rate: usize, credit: usize) -> State {
    let c = m.passthrough[(rate, credit)];
    let shared = 1.0 - mode_value * c;
    [shared, shared, 1.0, -mode_value]
}

fn mode_kernels(m: &ModelSpec, mode_value: f64) -> Vec<RegimeKernel> {
    let mut kernels = Vec::with_capacity(m.n_joint());
    for r in 0..m.n_rate() {
        for c in 0..m.n_credit() {
            debug_assert_eq!(kernels.len(), joint_index(r, c, m.n_credit()));
            kernels.push(RegimeKernel { params: m.q_params(r, c), loadings: mode_loadings(m, mode_value, r, c) });
        }
    }
    kernels
}

/// Mode values per joint regime for every survival mode and requested step.
/// Index as `[mode][step][joint regime]`.
pub fn corporate_mode_curves(
    m: &ModelSpec,
    x: &State,
    steps: &[usize],
    scheme: PricingScheme,
) -> Result<Vec<Vec<RegimePriceVector>>, PricingError> {
    let rating = m.rating_model()?;
    let p = transition_matrix(&m.joint_generator(), m.grid_delta)?.p;
    let labels = m.joint_generator().labels().to_vec();
    rating
        .lando
        .modes
        .iter()
        .map(|&d| {
            let out = backward_recursion(&mode_kernels(m, d), &p, m.grid_delta, steps, scheme, x)?;
            Ok(evaluate(&out, x, m.grid_delta, &labels))
        })
        .collect()
}

pub fn corporate_mode_values(
    m: &ModelSpec,
    mode: usize,
    x: &State,
    n: usize,
) -> Result<RegimePriceVector, PricingError> {
    let rating = m.rating_model()?;
    let d = *rating.lando.modes.get(mode).ok_or_else(|| PricingError::DimensionMismatch(format!("no mode {mode}")))?;
    let p = transition_matrix(&m.joint_generator(), m.grid_delta)?.p;
    let out = backward_recursion(&mode_kernels(m, d), &p, m.grid_delta, &[n], PricingScheme::default(), x)?;
    Ok(evaluate(&out, x, m.grid_delta, m.joint_generator().labels()).remove(0))
}

/// Combines mode values with the survival weights of `rating`.
pub fn combine_modes(lando: &LandoDecomposition, rating: usize, modes: &[RegimePriceVector]) -> RegimePriceVector {
    let n = modes[0].values.len();
    let values =
        (0..n).map(|s| modes.iter().enumerate().map(|(j, u)| lando.weights[(rating, j)] * u.values[s]).sum()).collect();
    RegimePriceVector { values, maturity: modes[0].maturity, labels: modes[0].labels.clone() }
}

/// Per-joint-regime zero-recovery corporate prices for `rating`.
pub fn corporate_price(m: &ModelSpec, rating: usize, x: &State, n: usize) -> Result<RegimePriceVector, PricingError> {
    let model = m.rating_model()?;
    if rating >= model.n_ratings() {
        return Err(PricingError::DimensionMismatch(format!("rating {rating} is default or absent")));
    }
    let modes: Vec<RegimePriceVector> =
        corporate_mode_curves(m, x, &[n], PricingScheme::default())?.into_iter().map(|mut v| v.remove(0)).collect();
    Ok(combine_modes(&model.lando, rating, &modes))
}

/// Collapsed single-term mode coefficients, `[mode][step][joint regime]`.
pub fn corporate_coefficients(
    m: &ModelSpec,
    reference: &State,
    steps: &[usize],
) -> Result<Vec<Vec<Vec<Term>>>, PricingError> {
    let rating = m.rating_model()?;
    let p = transition_matrix(&m.joint_generator(), m.grid_delta)?.p;
    rating
        .lando
        .modes
        .iter()
        .map(|&d| {
            let out =
                backward_recursion(&mode_kernels(m, d), &p, m.grid_delta, steps, PricingScheme::Collapsed, reference)?;
            Ok(out.functions.into_iter().map(|f| f.into_iter().map(|mut t| t.remove(0)).collect()).collect())
        })
        .collect()
}

/// Grid steps for a maturity in years; maturities must sit on the grid.
pub fn maturity_steps(maturity: f64, delta: f64) -> Result<usize, PricingError> {
    let n = (maturity / delta).round();
    if !(n >= 1.0) || (n * delta - maturity).abs() > 1e-9 * maturity.max(1.0) {
        return Err(PricingError::InvalidModel(format!("maturity {maturity} is not a multiple of the grid step")));
    }
    Ok(n as usize)
}

/// Price functions for a fixed maturity set, built once and evaluated at
/// any state and regime.
#[derive(Debug, Clone)]
pub struct YieldModel {
    pub maturities: Vec<f64>,
    pub steps: Vec<usize>,
    pub delta: f64,
    n_credit: usize,
    /// `[curve][maturity][rate regime]`, curves ordered CGB, CDB.
    sovereign: [Vec<Vec<Vec<Term>>>; 2],
    /// `[mode][maturity][joint regime]`; empty without a rating system.
    modes: Vec<Vec<Vec<Vec<Term>>>>,
    weights: DMatrix<f64>,
}

impl YieldModel {
    /// Builds sovereign price functions and, when `corporate` is set,
    /// survival-mode functions, all compacted at `reference`.
    pub fn build(
        m: &ModelSpec,
        maturities: &[f64],
        corporate: bool,
        scheme: PricingScheme,
        reference: &State,
    ) -> Result<Self, PricingError> {
        let steps: Vec<usize> =
            maturities.iter().map(|&t| maturity_steps(t, m.grid_delta)).collect::<Result<_, _>>()?;
        let pr = transition_matrix(&m.qr, m.grid_delta)?.p;
        let sovereign_for = |curve| -> Result<Vec<Vec<Vec<Term>>>, PricingError> {
            Ok(backward_recursion(&sovereign_kernels(m, curve), &pr, m.grid_delta, &steps, scheme, reference)?
                .functions)
        };
        let sovereign = [sovereign_for(Curve::Cgb)?, sovereign_for(Curve::Cdb)?];
        let (modes, weights) = if corporate {
            let rating = m.rating_model()?;
            let p = transition_matrix(&m.joint_generator(), m.grid_delta)?.p;
            let modes = rating
                .lando
                .modes
                .iter()
                .map(|&d| {
                    Ok(backward_recursion(&mode_kernels(m, d), &p, m.grid_delta, &steps, scheme, reference)?.functions)
                })
                .collect::<Result<Vec<_>, PricingError>>()?;
            (modes, rating.lando.weights.clone())
        } else {
            (Vec::new(), DMatrix::zeros(0, 0))
        };
        Ok(Self {
            maturities: maturities.to_vec(),
            steps,
            delta: m.grid_delta,
            n_credit: m.n_credit(),
            sovereign,
            modes,
            weights,
        })
    }

    pub fn has_corporate(&self) -> bool {
        !self.modes.is_empty()
    }

    pub fn n_ratings(&self) -> usize {
        self.weights.nrows()
    }

    fn tau(&self, k: usize) -> f64 {
        self.steps[k] as f64 * self.delta
    }

    pub fn sovereign_price(&self, curve: Curve, k: usize, rate: usize, x: &State) -> f64 {
        let c = match curve {
            Curve::Cgb => 0,
            Curve::Cdb => 1,
        };
        self.sovereign[c][k][rate].iter().map(|t| t.value(x)).sum()
    }

    pub fn sovereign_yield(&self, curve: Curve, k: usize, rate: usize, x: &State) -> f64 {
        -self.sovereign_price(curve, k, rate, x).ln() / self.tau(k)
    }

    pub fn corporate_price(&self, rating: usize, k: usize, rate: usize, credit: usize, x: &State) -> f64 {
        let s = joint_index(rate, credit, self.n_credit);
        self.modes
            .iter()
            .enumerate()
            .map(|(j, mode)| self.weights[(rating, j)] * mode[k][s].iter().map(|t| t.value(x)).sum::<f64>())
            .sum()
    }

    /// Corporate yield; `NaN` if a signed mode combination is not positive.
    pub fn corporate_yield(&self, rating: usize, k: usize, rate: usize, credit: usize, x: &State) -> f64 {
        let p = self.corporate_price(rating, k, rate, credit, x);
        if p > 0.0 {
            -p.ln() / self.tau(k)
        } else {
            f64::NAN
        }
    }

    /// The single term per regime when built with [`PricingScheme::Collapsed`].
    pub fn sovereign_term(&self, curve: Curve, k: usize, rate: usize) -> Option<Term> {
        let terms = &self.sovereign[matches!(curve, Curve::Cdb) as usize][k][rate];
        (terms.len() == 1).then(|| terms[0])
    }
}

/// Belief-weighted price.
pub fn mix_prices(prices: &RegimePriceVector, beliefs: &[f64]) -> Result<f64, PricingError> {
    if prices.values.len() != beliefs.len() {
        return Err(PricingError::DimensionMismatch(format!(
            "{} prices, {} beliefs",
            prices.values.len(),
            beliefs.len()
        )));
    }
    Ok(prices.values.iter().zip(beliefs).map(|(p, w)| p * w).sum())
}

pub fn price_to_yield(p: f64, tau: f64) -> Result<f64, PricingError> {
    if !(p > 0.0) {
        return Err(PricingError::NonPositivePrice(p));
    }
    Ok(-p.ln() / tau)
}

/// Additive split of a corporate yield.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpreadComponents {
    pub sovereign: f64,
    pub policy_bank_spread: f64,
    pub corporate_spread: f64,
}

impl SpreadComponents {
    pub fn corporate_yield(&self) -> f64 {
        self.sovereign + self.policy_bank_spread + self.corporate_spread
    }
}

pub fn spread_decomposition(y_cgb: f64, y_cdb: f64, y_corp: f64) -> SpreadComponents {
    SpreadComponents { sovereign: y_cgb, policy_bank_spread: y_cdb - y_cgb, corporate_spread: y_corp - y_cdb }
}

/// `sum w_t x_t / sum w_t`.
pub fn prob_weighted_mean(series: &[f64], weights: &[f64]) -> Result<f64, PricingError> {
    if series.len() != weights.len() {
        return Err(PricingError::DimensionMismatch("series vs weights".into()));
    }
    let mass: f64 = weights.iter().sum();
    if !(mass > 0.0) {
        return Err(PricingError::ZeroWeightMass);
    }
    Ok(series.iter().zip(weights).map(|(x, w)| x * w).sum::<f64>() / mass)
}
