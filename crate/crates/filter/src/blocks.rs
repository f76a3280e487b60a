//! Two-stage block filter: the rate block `(X1, X2, X3)` is filtered from
//! sovereign yields alone, then the credit factor `X4` is filtered from
//! corporate yields conditional on each rate regime's filtered rate state.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rsgcir_core::affine::GcirParams;
use rsgcir_core::panel::{CurvePanel, Segment};
use rsgcir_core::pricing::{Curve, ModelSpec, PricingScheme, State, YieldModel};
use rsgcir_core::regimes::{stationary_distribution, transition_matrix, CtmcGenerator};
use rsgcir_core::simulate::NoiseConfig;

use crate::moments::GcirTransition;
use crate::rsukf::{log_sum_exp, rs_ukf_step, RegimeBeliefs, RegimeModel, RsBelief};
use crate::ukf::{gray_collapse, AffineMeasurement, GaussianBelief, Measurement, UtParams};
use crate::FilterError;

/// Prior variance multiplier when a factor's long-run mean differs across
/// regimes.
pub const PRIOR_INFLATION: f64 = 10.0;
const GRID_TOL: f64 = 1e-9;

/// Filter settings shared by both stages.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FilterConfig {
    pub ut: UtParams,
}

/// Filtered rate-block state at one date: regime probabilities and the
/// regime-conditional posterior of `(X1, X2, X3)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RateBlockSummary {
    pub states: Vec<GaussianBelief>,
    pub probs: Vec<f64>,
}

impl RateBlockSummary {
    /// Regime-conditional filtered mean, padded with `x4`.
    pub fn state(&self, rate: usize, x4: f64) -> State {
        let m = &self.states[rate].mean;
        [m[0], m[1], m[2], x4]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateFilterOutput {
    pub summaries: Vec<RateBlockSummary>,
    pub predicted_probs: Vec<Vec<f64>>,
    /// Per-date log predictive densities.
    pub contributions: Vec<f64>,
    pub loglik: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CreditFilterOutput {
    /// `[date][rate regime]` conditional credit filters.
    pub conditional: Vec<Vec<RsBelief>>,
    /// `[date][credit regime]` probabilities integrated over rate regimes.
    pub marginal: Vec<Vec<f64>>,
    pub contributions: Vec<f64>,
    pub loglik: f64,
}

fn stationary_or_uniform(g: &CtmcGenerator) -> Vec<f64> {
    stationary_distribution(g)
        .map(|p| p.iter().copied().collect())
        .unwrap_or_else(|_| vec![1.0 / g.len() as f64; g.len()])
}

/// Per-regime priors: mean at the regime's long-run level, variance at the
/// stationary variance, inflated where levels differ across regimes.
fn regime_priors(per_regime: &[Vec<GcirParams>]) -> Result<Vec<GaussianBelief>, FilterError> {
    let d = per_regime[0].len();
    let inflate: Vec<f64> = (0..d)
        .map(|k| {
            let t0 = per_regime[0][k].theta;
            if per_regime.iter().any(|ps| ps[k].theta != t0) {
                PRIOR_INFLATION
            } else {
                1.0
            }
        })
        .collect();
    per_regime
        .iter()
        .map(|ps| {
            let mean = DVector::from_iterator(d, ps.iter().map(|p| p.theta));
            let var = DVector::from_iterator(d, ps.iter().zip(&inflate).map(|(p, f)| p.stationary_variance() * f));
            GaussianBelief::new(mean, DMatrix::from_diagonal(&var))
        })
        .collect()
}

fn check_grid(m: &ModelSpec) -> Result<(), FilterError> {
    if (m.grid_delta - 1.0 / 52.0).abs() > GRID_TOL {
        return Err(FilterError::Dimension(format!("panel is weekly but the model grid is {}", m.grid_delta)));
    }
    Ok(())
}

fn rate_physical(m: &ModelSpec) -> Vec<Vec<GcirParams>> {
    m.rate_factors.iter().map(|f| f.iter().map(|s| s.physical).collect()).collect()
}

fn unique_maturities(panel: &CurvePanel, columns: &[usize]) -> Vec<f64> {
    let mut mats: Vec<f64> = columns.iter().map(|&j| panel.series[j].maturity).collect();
    mats.sort_by(f64::total_cmp);
    mats.dedup();
    mats
}

fn maturity_index(mats: &[f64], maturity: f64) -> usize {
    mats.iter().position(|m| *m == maturity).expect("maturity collected from the panel")
}

fn regime_noise(sd: f64, n: usize) -> DMatrix<f64> {
    DMatrix::from_diagonal_element(n, n, sd * sd)
}

/// Sovereign yield maps per rate regime, affine in `(X1, X2, X3)` under the
/// collapsed pricing scheme.
pub fn sovereign_measurements(
    panel: &CurvePanel,
    m: &ModelSpec,
) -> Result<(Vec<usize>, Vec<AffineMeasurement>), FilterError> {
    let columns: Vec<usize> =
        (0..panel.series.len()).filter(|&j| matches!(panel.series[j].segment, Segment::Cgb | Segment::Cdb)).collect();
    if columns.is_empty() {
        return Err(FilterError::MissingSeries("no CGB or CDB yields in the panel".into()));
    }
    let mats = unique_maturities(panel, &columns);
    let ym = YieldModel::build(m, &mats, false, PricingScheme::Collapsed, &m.reference_state())?;
    let maps = (0..m.n_rate())
        .map(|r| {
            let mut h = DMatrix::zeros(columns.len(), 3);
            let mut d = DVector::zeros(columns.len());
            for (i, &j) in columns.iter().enumerate() {
                let s = panel.series[j];
                let curve = if s.segment == Segment::Cgb { Curve::Cgb } else { Curve::Cdb };
                let k = maturity_index(&mats, s.maturity);
                let term = ym.sovereign_term(curve, k, r).expect("collapsed scheme keeps one term");
                let tau = ym.steps[k] as f64 * ym.delta;
                for f in 0..3 {
                    h[(i, f)] = term.b[f] / tau;
                }
                d[i] = -term.ln_c / tau;
            }
            AffineMeasurement { h, d }
        })
        .collect();
    Ok((columns, maps))
}

/// Stage one: regime-switching UKF over the rate block using CGB and CDB
/// yields.
pub fn rate_block_filter(
    panel: &CurvePanel,
    m: &ModelSpec,
    noise: &NoiseConfig,
    cfg: &FilterConfig,
) -> Result<RateFilterOutput, FilterError> {
    check_grid(m)?;
    if noise.rate_sd.len() != m.n_rate() {
        return Err(FilterError::Dimension("one rate noise level per rate regime".into()));
    }
    let (columns, maps) = sovereign_measurements(panel, m)?;
    let physical = rate_physical(m);
    let transitions: Vec<GcirTransition> =
        physical.iter().map(|ps| GcirTransition::new(ps.clone(), m.grid_delta)).collect();
    let noises: Vec<DMatrix<f64>> = noise.rate_sd.iter().map(|&sd| regime_noise(sd, columns.len())).collect();
    let models: Vec<RegimeModel<'_, _, _>> = (0..m.n_rate())
        .map(|r| RegimeModel { transition: &transitions[r], measurement: &maps[r], noise_cov: &noises[r] })
        .collect();
    let p = transition_matrix(&m.qr, m.grid_delta)?.p;

    let mut belief =
        RsBelief { states: regime_priors(&physical)?, regimes: RegimeBeliefs::new(stationary_or_uniform(&m.qr))? };
    let mut out =
        RateFilterOutput { summaries: Vec::new(), predicted_probs: Vec::new(), contributions: Vec::new(), loglik: 0.0 };
    for row in &panel.values {
        let y: Vec<Option<f64>> = columns.iter().map(|&j| row[j]).collect();
        let step = rs_ukf_step(&belief, &y, &models, &p, &cfg.ut)?;
        let ll = if y.iter().all(Option::is_none) { 0.0 } else { step.loglik };
        out.contributions.push(ll);
        out.loglik += ll;
        out.predicted_probs.push(step.predicted_probs);
        out.summaries.push(RateBlockSummary {
            states: step.posterior.states.clone(),
            probs: step.posterior.regimes.probs().to_vec(),
        });
        belief = step.posterior;
    }
    Ok(out)
}

/// Corporate yields as a function of `X4` with the rate block held at an
/// injected state.
struct CorporateMeasurement<'a> {
    ym: &'a YieldModel,
    columns: &'a [(usize, usize)],
    rate: usize,
    credit: usize,
    rate_state: State,
}

impl Measurement for CorporateMeasurement<'_> {
    fn dim(&self) -> usize {
        self.columns.len()
    }

    fn observe(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut state = self.rate_state;
        state[3] = x[0];
        DVector::from_iterator(
            self.columns.len(),
            self.columns.iter().map(|&(rating, k)| self.ym.corporate_yield(rating, k, self.rate, self.credit, &state)),
        )
    }
}

/// Stage two: one conditional regime-switching UKF over `X4` per rate
/// regime, fed the rate block's regime-conditional filtered states. Each
/// date's density mixes the conditional filters with the filtered rate
/// regime probabilities.
pub fn credit_block_filter(
    panel: &CurvePanel,
    m: &ModelSpec,
    noise: &NoiseConfig,
    rate: &[RateBlockSummary],
    cfg: &FilterConfig,
) -> Result<CreditFilterOutput, FilterError> {
    check_grid(m)?;
    if noise.credit_sd.len() != m.n_credit() {
        return Err(FilterError::Dimension("one credit noise level per credit regime".into()));
    }
    if rate.len() != panel.n_dates() {
        return Err(FilterError::Dimension(format!("{} rate summaries for {} dates", rate.len(), panel.n_dates())));
    }
    let corp: Vec<usize> = (0..panel.series.len()).filter(|&j| panel.series[j].segment.is_corporate()).collect();
    if corp.is_empty() {
        return Err(FilterError::MissingSeries("no corporate yields in the panel".into()));
    }
    let mats = unique_maturities(panel, &corp);
    let ym = YieldModel::build(m, &mats, true, PricingScheme::Collapsed, &m.reference_state())?;
    let columns: Vec<(usize, usize)> = corp
        .iter()
        .map(|&j| {
            let s = panel.series[j];
            let rating = s.segment.rating_index().expect("corporate segment");
            if rating >= ym.n_ratings() {
                return Err(FilterError::MissingSeries(format!("rating system has no {}", s.segment)));
            }
            Ok((rating, maturity_index(&mats, s.maturity)))
        })
        .collect::<Result<_, _>>()?;

    let physical: Vec<Vec<GcirParams>> = m.credit_factors.iter().map(|f| vec![f.physical]).collect();
    let transitions: Vec<GcirTransition> =
        physical.iter().map(|ps| GcirTransition::new(ps.clone(), m.grid_delta)).collect();
    let noises: Vec<DMatrix<f64>> = noise.credit_sd.iter().map(|&sd| regime_noise(sd, columns.len())).collect();
    let p = transition_matrix(&m.qc, m.grid_delta)?.p;
    let prior =
        RsBelief { states: regime_priors(&physical)?, regimes: RegimeBeliefs::new(stationary_or_uniform(&m.qc))? };
    let mut beliefs = vec![prior; m.n_rate()];

    let mut out =
        CreditFilterOutput { conditional: Vec::new(), marginal: Vec::new(), contributions: Vec::new(), loglik: 0.0 };
    for (t, row) in panel.values.iter().enumerate() {
        let y: Vec<Option<f64>> = corp.iter().map(|&j| row[j]).collect();
        let mut mixture = Vec::with_capacity(m.n_rate());
        for r in 0..m.n_rate() {
            let maps: Vec<CorporateMeasurement<'_>> = (0..m.n_credit())
                .map(|c| CorporateMeasurement {
                    ym: &ym,
                    columns: &columns,
                    rate: r,
                    credit: c,
                    rate_state: rate[t].state(r, 0.0),
                })
                .collect();
            let models: Vec<RegimeModel<'_, _, _>> = (0..m.n_credit())
                .map(|c| RegimeModel { transition: &transitions[c], measurement: &maps[c], noise_cov: &noises[c] })
                .collect();
            let step = rs_ukf_step(&beliefs[r], &y, &models, &p, &cfg.ut)?;
            mixture.push(rate[t].probs[r].ln() + step.loglik);
            beliefs[r] = step.posterior;
        }
        let ll = if y.iter().all(Option::is_none) {
            0.0
        } else {
            let v = log_sum_exp(&mixture);
            if !v.is_finite() {
                return Err(FilterError::ZeroMixtureLikelihood);
            }
            v
        };
        out.contributions.push(ll);
        out.loglik += ll;
        out.marginal.push(
            (0..m.n_credit())
                .map(|c| (0..m.n_rate()).map(|r| rate[t].probs[r] * beliefs[r].regimes.probs()[c]).sum())
                .collect(),
        );
        out.conditional.push(beliefs.clone());
    }
    Ok(out)
}

/// Regime-collapsed filtered moments of the rate block.
pub fn collapsed_rate_state(s: &RateBlockSummary) -> GaussianBelief {
    gray_collapse(&s.probs, &s.states)
}

/// Filtered `X4` moments integrated over both regime chains.
pub fn collapsed_credit_state(rate: &RateBlockSummary, conditional: &[RsBelief]) -> GaussianBelief {
    let mut probs = Vec::new();
    let mut states = Vec::new();
    for (r, b) in conditional.iter().enumerate() {
        for (c, s) in b.states.iter().enumerate() {
            probs.push(rate.probs[r] * b.regimes.probs()[c]);
            states.push(s.clone());
        }
    }
    gray_collapse(&probs, &states)
}

/// Writes one row per date and regime: probability, filtered factor means
/// and standard deviations (collapsed over regimes), and the date's
/// log-likelihood contribution.
pub fn write_filter_csv(
    path: &Path,
    dates: &[impl ToString],
    labels: &[String],
    probs: &[Vec<f64>],
    states: &[GaussianBelief],
    factor_names: &[&str],
    contributions: &[f64],
) -> Result<(), FilterError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["date".to_string(), "regime".into(), "probability".into()];
    for f in factor_names {
        header.push(format!("{f}_mean"));
        header.push(format!("{f}_sd"));
    }
    header.push("loglik".into());
    w.write_record(&header)?;
    for t in 0..dates.len() {
        for (s, label) in labels.iter().enumerate() {
            let mut rec = vec![dates[t].to_string(), label.clone(), probs[t][s].to_string()];
            for k in 0..factor_names.len() {
                rec.push(states[t].mean[k].to_string());
                rec.push(states[t].cov[(k, k)].max(0.0).sqrt().to_string());
            }
            rec.push(contributions[t].to_string());
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}
