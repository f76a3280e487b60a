//! Simulation: regime paths, factor paths, and Monte Carlo oracles for the
//! transform and for bond prices.
//!
//! Randomness comes from ChaCha20. Every independent unit of work (a path,
//! a chain, a noise draw sequence) gets its own stream `set_stream(index)`
//! under the run seed, so results do not depend on thread scheduling.

use chrono::{Days, NaiveDate};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::affine::GcirParams;
use crate::linalg::expm;
use crate::panel::{CurvePanel, PanelError, Segment, Series};
use crate::pricing::{Curve, ModelSpec, PricingError, PricingScheme, State, YieldModel, N_FACTORS};
use crate::regimes::{stationary_distribution, transition_matrix, CtmcGenerator};

/// Generator for stream `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Piecewise-constant regime path: `states[k]` holds on `[times[k], times[k+1])`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimePath {
    pub times: Vec<f64>,
    pub states: Vec<usize>,
    pub horizon: f64,
}

impl RegimePath {
    pub fn constant(state: usize, horizon: f64) -> Self {
        Self { times: vec![0.0], states: vec![state], horizon }
    }

    pub fn state_at(&self, t: f64) -> usize {
        let k = self.times.partition_point(|&s| s <= t);
        self.states[k.saturating_sub(1)]
    }

    /// Time spent in each of `n_states` states up to the horizon.
    pub fn occupation(&self, n_states: usize) -> Vec<f64> {
        let mut occ = vec![0.0; n_states];
        for (k, &s) in self.states.iter().enumerate() {
            let end = self.times.get(k + 1).copied().unwrap_or(self.horizon);
            occ[s] += end - self.times[k];
        }
        occ
    }
}

/// Gillespie simulation with exponential holding times.
pub fn simulate_ctmc(g: &CtmcGenerator, initial: usize, horizon: f64, rng: &mut impl Rng) -> RegimePath {
    let q = g.q();
    let mut path = RegimePath::constant(initial, horizon);
    let mut state = initial;
    let mut t = 0.0;
    loop {
        let rate = -q[(state, state)];
        if rate <= 0.0 {
            break;
        }
        let hold: f64 = Exp1.sample(rng);
        t += hold / rate;
        if t >= horizon {
            break;
        }
        let mut u = rng.random::<f64>() * rate;
        let mut next = state;
        for j in 0..g.len() {
            if j == state {
                continue;
            }
            next = j;
            u -= q[(state, j)];
            if u < 0.0 {
                break;
            }
        }
        state = next;
        path.times.push(t);
        path.states.push(state);
    }
    path
}

/// Draws an index from a probability row.
pub fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let mut u = rng.random::<f64>();
    for (i, p) in probs.iter().enumerate() {
        u -= p;
        if u < 0.0 {
            return i;
        }
    }
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

/// One full-truncation Euler step: the variance is floored at zero inside
/// the square root, the drift uses the untruncated state.
#[inline]
pub fn euler_step(p: &GcirParams, x: f64, dt: f64, z: f64) -> f64 {
    x + p.kappa * (p.theta - x) * dt + ((p.alpha + p.beta * x).max(0.0) * dt).sqrt() * z
}

/// Factor path on the grid `0, dt, ..., horizon` with parameters switching
/// by `regimes` (index into `params`); without a path `params[0]` applies.
pub fn simulate_gcir(
    params: &[GcirParams],
    x0: f64,
    horizon: f64,
    dt: f64,
    regimes: Option<&RegimePath>,
    rng: &mut impl Rng,
) -> Vec<f64> {
    let steps = (horizon / dt).round() as usize;
    let mut path = Vec::with_capacity(steps + 1);
    let mut x = x0;
    path.push(x);
    for n in 0..steps {
        let s = regimes.map_or(0, |r| r.state_at(n as f64 * dt));
        let z: f64 = StandardNormal.sample(rng);
        x = euler_step(&params[s], x, dt, z);
        path.push(x);
    }
    path
}

/// Monte Carlo mean and its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
}

impl McEstimate {
    pub fn from_samples(samples: impl Iterator<Item = f64>) -> Self {
        let (mut n, mut mean, mut m2) = (0.0, 0.0, 0.0);
        for v in samples {
            n += 1.0;
            let d = v - mean;
            mean += d / n;
            m2 += d * (v - mean);
        }
        let var = if n > 1.0 { m2 / (n - 1.0) } else { 0.0 };
        Self { mean, std_err: (var / n).sqrt() }
    }

    /// Distance from `value` in standard errors; zero-error estimates are
    /// compared exactly.
    pub fn z_score(&self, value: f64) -> f64 {
        let d = (self.mean - value).abs();
        if self.std_err > 0.0 {
            d / self.std_err
        } else if d == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    }
}

/// Monte Carlo estimate of `E[exp(-c1 int_0^tau X du - c2 X_tau)]` with
/// trapezoidal integration on the Euler grid.
pub fn mc_transform_oracle(
    p: &GcirParams,
    x0: f64,
    c1: f64,
    c2: f64,
    tau: f64,
    paths: usize,
    dt: f64,
    seed: u64,
) -> McEstimate {
    let steps = ((tau / dt).round() as usize).max(1);
    let h = tau / steps as f64;
    let samples: Vec<f64> = (0..paths)
        .into_par_iter()
        .map(|i| {
            if c1 == 0.0 && c2 == 0.0 {
                return 1.0;
            }
            let mut rng = stream_rng(seed, i as u64);
            let mut x = x0;
            let mut integral = 0.5 * x;
            for _ in 0..steps {
                let z: f64 = StandardNormal.sample(&mut rng);
                x = euler_step(p, x, h, z);
                integral += x;
            }
            integral = (integral - 0.5 * x) * h;
            (-c1 * integral - c2 * x).exp()
        })
        .collect();
    McEstimate::from_samples(samples.into_iter())
}

/// Settings for [`mc_bond_prices`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PricingMcConfig {
    pub paths: usize,
    /// Euler substeps per grid step.
    pub substeps: usize,
    pub seed: u64,
}

/// Monte Carlo bond prices conditional on a starting joint regime.
#[derive(Debug, Clone, PartialEq)]
pub struct McBondPrices {
    pub steps: Vec<usize>,
    pub cgb: Vec<McEstimate>,
    pub cdb: Vec<McEstimate>,
    /// `corporate[rating][maturity]`.
    pub corporate: Vec<Vec<McEstimate>>,
}

/// Conditional Monte Carlo of the grid model priced by the recursion:
/// regimes are held over each grid step and jump at grid points with
/// `exp(Q delta)`, factors follow risk-neutral Euler paths, and corporate
/// survival given the integrated driver `int (c (x1 + x2) + x4)` comes from
/// the matrix exponential of the loss-adjusted rating block.
pub fn mc_bond_prices(
    m: &ModelSpec,
    start: (usize, usize),
    x0: &State,
    steps: &[usize],
    cfg: &PricingMcConfig,
) -> Result<McBondPrices, PricingError> {
    if start.0 >= m.n_rate() || start.1 >= m.n_credit() {
        return Err(PricingError::DimensionMismatch(format!("no joint regime {start:?}")));
    }
    let pr = transition_matrix(&m.qr, m.grid_delta)?.p;
    let pc = transition_matrix(&m.qc, m.grid_delta)?.p;
    let block = m.rating.as_ref().map(|r| r.generator.loss_adjusted_block());
    let n_ratings = block.as_ref().map_or(0, |b| b.nrows());
    let max_step = steps.iter().copied().max().unwrap_or(0);
    let h = m.grid_delta / cfg.substeps as f64;
    let rows =
        |p: &DMatrix<f64>| -> Vec<Vec<f64>> { (0..p.nrows()).map(|i| p.row(i).iter().copied().collect()).collect() };
    let (pr_rows, pc_rows) = (rows(&pr), rows(&pc));

    let per_path: Vec<Vec<f64>> = (0..cfg.paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(cfg.seed, i as u64);
            let (mut r, mut c) = start;
            let mut x = *x0;
            let (mut i12, mut i3, mut imu) = (0.0, 0.0, 0.0);
            let mut out = Vec::with_capacity(steps.len() * (2 + n_ratings));
            let record = |n: usize, i12: f64, i3: f64, imu: f64, out: &mut Vec<f64>| {
                for &s in steps {
                    if s != n {
                        continue;
                    }
                    let cgb = (-i12).exp();
                    let cdb = (-i12 - i3).exp();
                    out.push(cgb);
                    out.push(cdb);
                    if let Some(b) = &block {
                        let e = expm(&(b * imu)).expect("finite rating block");
                        for k in 0..n_ratings {
                            out.push(cdb * e.row(k).sum());
                        }
                    }
                }
            };
            record(0, i12, i3, imu, &mut out);
            for n in 1..=max_step {
                let q = m.q_params(r, c);
                let pass = m.passthrough[(r, c)];
                let driver = |x: &State| pass * (x[0] + x[1]) + x[3];
                let mut prev = x;
                for _ in 0..cfg.substeps {
                    let mut next = [0.0; N_FACTORS];
                    for k in 0..N_FACTORS {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        next[k] = euler_step(&q[k], prev[k], h, z);
                    }
                    i12 += 0.5 * h * (prev[0] + prev[1] + next[0] + next[1]);
                    i3 += 0.5 * h * (prev[2] + next[2]);
                    imu += 0.5 * h * (driver(&prev) + driver(&next));
                    prev = next;
                }
                x = prev;
                r = sample_index(&pr_rows[r], &mut rng);
                c = sample_index(&pc_rows[c], &mut rng);
                record(n, i12, i3, imu, &mut out);
            }
            out
        })
        .collect();

    let width = 2 + n_ratings;
    let column = |k: usize| McEstimate::from_samples(per_path.iter().map(|v| v[k]));
    let (mut cgb, mut cdb) = (Vec::new(), Vec::new());
    let mut corporate = vec![Vec::new(); n_ratings];
    // Values are recorded in ascending step order; map back to the request.
    let mut order: Vec<usize> = (0..steps.len()).collect();
    order.sort_by_key(|&i| steps[i]);
    let mut slot = vec![0; steps.len()];
    for (pos, &i) in order.iter().enumerate() {
        slot[i] = pos;
    }
    for &pos in &slot {
        cgb.push(column(pos * width));
        cdb.push(column(pos * width + 1));
        for (k, corp) in corporate.iter_mut().enumerate() {
            corp.push(column(pos * width + 2 + k));
        }
    }
    Ok(McBondPrices { steps: steps.to_vec(), cgb, cdb, corporate })
}

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error(transparent)]
    Pricing(#[from] PricingError),
    #[error(transparent)]
    Panel(#[from] PanelError),
    #[error("invalid design: {0}")]
    InvalidDesign(String),
}

/// Regime-dependent measurement noise standard deviations (yield units).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseConfig {
    /// Per rate regime, for CGB and CDB yields.
    pub rate_sd: Vec<f64>,
    /// Per credit regime, for corporate yields.
    pub credit_sd: Vec<f64>,
}

/// What to simulate.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDesign {
    pub start: NaiveDate,
    pub weeks: usize,
    pub maturities: Vec<f64>,
    pub segments: Vec<Segment>,
    pub noise: NoiseConfig,
    /// Euler substeps per week.
    pub substeps: usize,
    /// Weeks simulated and discarded before the first date.
    pub burn_in: usize,
    pub scheme: PricingScheme,
}

/// Latent paths behind a synthetic panel.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTruth {
    pub dates: Vec<NaiveDate>,
    pub rate_regime: Vec<usize>,
    pub credit_regime: Vec<usize>,
    pub factors: Vec<State>,
}

impl SyntheticTruth {
    pub fn write_csv(&self, path: &std::path::Path, m: &ModelSpec) -> Result<(), PanelError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["date", "rate_regime", "credit_regime", "x1", "x2", "x3", "x4"])?;
        for t in 0..self.dates.len() {
            let x = self.factors[t];
            w.write_record([
                self.dates[t].to_string(),
                m.qr.labels()[self.rate_regime[t]].clone(),
                m.qc.labels()[self.credit_regime[t]].clone(),
                x[0].to_string(),
                x[1].to_string(),
                x[2].to_string(),
                x[3].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPanel {
    pub panel: CurvePanel,
    pub truth: SyntheticTruth,
}

fn stationary_or_uniform(g: &CtmcGenerator) -> Vec<f64> {
    stationary_distribution(g)
        .map(|p| p.iter().copied().collect())
        .unwrap_or_else(|_| vec![1.0 / g.len() as f64; g.len()])
}

/// Model-implied yield of a segment in a joint regime; `k` indexes the
/// yield model's maturities.
pub fn segment_yield(ym: &YieldModel, segment: Segment, k: usize, rate: usize, credit: usize, x: &State) -> f64 {
    match segment {
        Segment::Cgb => ym.sovereign_yield(Curve::Cgb, k, rate, x),
        Segment::Cdb => ym.sovereign_yield(Curve::Cdb, k, rate, x),
        corp => ym.corporate_yield(corp.rating_index().expect("corporate segment"), k, rate, credit, x),
    }
}

/// Simulates physical regime and factor paths and the noisy weekly yields
/// they imply. Observations in regime `s` are the regime-`s` conditional
/// model yields plus Gaussian noise with the regime's standard deviation.
///
/// Streams under `seed`: 0 and 1 the rate and credit chains, 2 the factor
/// shocks, 3 the measurement noise, 4 the initial regimes.
pub fn simulate_panel(m: &ModelSpec, design: &PanelDesign, seed: u64) -> Result<SyntheticPanel, SimulationError> {
    if design.noise.rate_sd.len() != m.n_rate() || design.noise.credit_sd.len() != m.n_credit() {
        return Err(SimulationError::InvalidDesign("noise levels must be given per regime".into()));
    }
    if design.substeps == 0 || design.weeks == 0 {
        return Err(SimulationError::InvalidDesign("weeks and substeps must be positive".into()));
    }
    let corporate = design.segments.iter().any(|s| s.is_corporate());
    if corporate {
        let n = m.rating_model()?.n_ratings();
        if let Some(s) = design.segments.iter().find(|s| s.rating_index().is_some_and(|i| i >= n)) {
            return Err(SimulationError::InvalidDesign(format!("rating system has no {s}")));
        }
    }
    let ym = YieldModel::build(m, &design.maturities, corporate, design.scheme, &m.reference_state())?;

    let delta = m.grid_delta;
    let total = design.burn_in + design.weeks;
    let horizon = total as f64 * delta;
    let mut init = stream_rng(seed, 4);
    let r0 = sample_index(&stationary_or_uniform(&m.qr), &mut init);
    let c0 = sample_index(&stationary_or_uniform(&m.qc), &mut init);
    let rate_path = simulate_ctmc(&m.qr, r0, horizon, &mut stream_rng(seed, 0));
    let credit_path = simulate_ctmc(&m.qc, c0, horizon, &mut stream_rng(seed, 1));

    let mut shocks = stream_rng(seed, 2);
    let h = delta / design.substeps as f64;
    let physical = |r: usize, c: usize| -> [GcirParams; N_FACTORS] {
        let f = &m.rate_factors[r];
        [f[0].physical, f[1].physical, f[2].physical, m.credit_factors[c].physical]
    };
    let start = physical(r0, c0);
    let mut x: State = [start[0].theta, start[1].theta, start[2].theta, start[3].theta];
    let mut truth =
        SyntheticTruth { dates: Vec::new(), rate_regime: Vec::new(), credit_regime: Vec::new(), factors: Vec::new() };
    for week in 0..total {
        if week >= design.burn_in {
            let t = week as f64 * delta;
            truth.rate_regime.push(rate_path.state_at(t));
            truth.credit_regime.push(credit_path.state_at(t));
            truth.factors.push(x);
        }
        for sub in 0..design.substeps {
            let t = week as f64 * delta + sub as f64 * h;
            let p = physical(rate_path.state_at(t), credit_path.state_at(t));
            for k in 0..N_FACTORS {
                let z: f64 = StandardNormal.sample(&mut shocks);
                x[k] = euler_step(&p[k], x[k], h, z);
            }
        }
    }
    truth.dates = (0..design.weeks)
        .map(|w| design.start.checked_add_days(Days::new(7 * w as u64)).expect("date in range"))
        .collect();

    let mut series: Vec<Series> = Vec::new();
    let mut segments = design.segments.clone();
    segments.sort();
    segments.dedup();
    for &segment in &segments {
        for &maturity in &design.maturities {
            series.push(Series { segment, maturity });
        }
    }
    let mut noise = stream_rng(seed, 3);
    let values = (0..design.weeks)
        .map(|t| {
            let (r, c, xt) = (truth.rate_regime[t], truth.credit_regime[t], truth.factors[t]);
            series
                .iter()
                .map(|s| {
                    let k = design.maturities.iter().position(|m| *m == s.maturity).expect("design maturity");
                    let sd = if s.segment.is_corporate() { design.noise.credit_sd[c] } else { design.noise.rate_sd[r] };
                    let z: f64 = StandardNormal.sample(&mut noise);
                    let y = segment_yield(&ym, s.segment, k, r, c, &xt) + sd * z;
                    y.is_finite().then_some(y)
                })
                .collect()
        })
        .collect();
    let panel = CurvePanel::new(truth.dates.clone(), series, values)?;
    Ok(SyntheticPanel { panel, truth })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affine::Measure;

    #[test]
    fn zero_generator_path_is_constant() {
        let g = CtmcGenerator::new(DMatrix::zeros(2, 2), vec!["a".into(), "b".into()]).unwrap();
        let p = simulate_ctmc(&g, 1, 100.0, &mut stream_rng(1, 0));
        assert_eq!(p.states, vec![1]);
        assert_eq!(p.state_at(50.0), 1);
    }

    #[test]
    fn zero_diffusion_path_decays_to_theta() {
        let p = GcirParams::zero_diffusion(0.7, 0.05, Measure::Physical).unwrap();
        let path = simulate_gcir(&[p], 0.01, 2.0, 1e-4, None, &mut stream_rng(3, 0));
        let exact = 0.05 + (0.01 - 0.05) * (-0.7f64 * 2.0).exp();
        assert!((path.last().unwrap() - exact).abs() < 1e-5);
    }

    #[test]
    fn trivial_transform_is_exactly_one() {
        let p = GcirParams::new(0.5, 0.05, 0.0, 0.02, Measure::RiskNeutral).unwrap();
        let e = mc_transform_oracle(&p, 0.03, 0.0, 0.0, 1.0, 10_000, 1.0 / 832.0, 9);
        assert_eq!((e.mean, e.std_err), (1.0, 0.0));
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: f64 = stream_rng(5, 2).random();
        let b: f64 = stream_rng(5, 2).random();
        let c: f64 = stream_rng(5, 3).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn estimate_from_samples() {
        let e = McEstimate::from_samples([1.0, 2.0, 3.0, 4.0].into_iter());
        assert_eq!(e.mean, 2.5);
        assert!((e.std_err - (5.0f64 / 12.0).sqrt()).abs() < 1e-15);
    }
}
