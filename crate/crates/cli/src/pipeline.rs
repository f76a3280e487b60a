//! One function per subcommand. Each stage reads its inputs from the
//! configuration and from earlier stages' artifacts in the output
//! directory, and commits its own artifacts with a manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use rsgcir_core::affine::{GcirParams, Measure, RiskPrice};
use rsgcir_core::fixtures::WEEK;
use rsgcir_core::panel::{build_spreads, ingest_panel, CurvePanel, Segment, SpreadKind};
use rsgcir_core::pricing::{
    mix_prices, spread_decomposition, Curve, FactorSpec, ModelSpec, RegimePriceVector, YieldModel,
};
use rsgcir_core::regimes::{stationary_distribution, CtmcGenerator};
use rsgcir_core::simulate::{simulate_panel, stream_rng};
use rsgcir_filter::blocks::{
    collapsed_credit_state, collapsed_rate_state, credit_block_filter, rate_block_filter, write_filter_csv,
    RateFilterOutput,
};
use rsgcir_filter::estimation::bootstrap::{block_bootstrap, BootstrapConfig};
use rsgcir_filter::estimation::sandwich::SandwichConfig;
use rsgcir_filter::estimation::stages::{estimate, joint_sandwich, rate_sandwich, CreditStage, RateStage};
use rsgcir_filter::estimation::{EstimationError, EstimationResult, ModelState, ParamVector, Stage};
use rsgcir_filter::pricing_errors::{fitted_sovereign_yields, pricing_error_stats, ErrorStats};
use rsgcir_hmm::{classify, fit_hmm, information_criteria, regime_durations, regime_moments, FitConfig, HmmFit};
use serde::{Deserialize, Serialize};

use crate::artifacts::{Manifest, StageOutput};
use crate::config::LoadedConfig;
use crate::{checks, report, CliError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Command {
    Simulate,
    Hmm,
    CalibrateRatings,
    EstimateRates,
    EstimateCredit,
    Price,
    Decompose,
    Validate,
    Report,
}

impl Command {
    pub const ALL: [Command; 9] = [
        Command::Simulate,
        Command::Hmm,
        Command::CalibrateRatings,
        Command::EstimateRates,
        Command::EstimateCredit,
        Command::Price,
        Command::Decompose,
        Command::Validate,
        Command::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Hmm => "hmm",
            Command::CalibrateRatings => "calibrate-ratings",
            Command::EstimateRates => "estimate-rates",
            Command::EstimateCredit => "estimate-credit",
            Command::Price => "price",
            Command::Decompose => "decompose",
            Command::Validate => "validate",
            Command::Report => "report",
        }
    }

    /// Stream of the run seed reserved for the stage.
    fn stream(self) -> u64 {
        Command::ALL.iter().position(|c| *c == self).expect("listed") as u64 + 1
    }
}

/// Artifact names shared between stages.
pub mod names {
    pub const PANEL: &str = "panel.csv";
    pub const PANEL_TRUTH: &str = "panel_truth.csv";
    pub const HMM_FIT: &str = "hmm_fit.csv";
    pub const HMM_MOMENTS: &str = "hmm_moments.csv";
    pub const HMM_DURATIONS: &str = "hmm_durations.csv";
    pub const HMM_CLASSIFICATION: &str = "hmm_classification.csv";
    pub const RATINGS_JSON: &str = "ratings.json";
    pub const RATINGS_GENERATOR: &str = "ratings_generator.csv";
    pub const RATINGS_LANDO: &str = "ratings_lando.csv";
    pub const RATE_ESTIMATES: &str = "rate_estimates.json";
    pub const RATE_ESTIMATES_CSV: &str = "rate_estimates.csv";
    pub const RATE_FILTERED: &str = "rate_filtered.csv";
    pub const PRICING_ERRORS: &str = "rate_pricing_errors.csv";
    pub const CREDIT_ESTIMATES: &str = "credit_estimates.json";
    pub const CREDIT_ESTIMATES_CSV: &str = "credit_estimates.csv";
    pub const CREDIT_FILTERED: &str = "credit_filtered.csv";
    pub const PRICES: &str = "prices.csv";
    pub const PRICE_JSON: &str = "price.json";
    pub const DECOMPOSITION: &str = "decomposition.csv";
    pub const DECOMPOSITION_SUMMARY: &str = "decomposition_summary.csv";
    pub const DECOMPOSITION_JSON: &str = "decomposition.json";
    pub const VALIDATE: &str = "validate.json";
}

#[derive(Debug, Clone)]
pub struct RunContext {
    pub loaded: LoadedConfig,
    pub seed: u64,
    pub out: PathBuf,
}

impl RunContext {
    /// Uses the configured seed unless `seed` overrides it.
    pub fn new(loaded: LoadedConfig, seed: Option<u64>, out: PathBuf) -> Self {
        let seed = seed.unwrap_or(loaded.config.seed);
        Self { loaded, seed, out }
    }

    /// Source of sub-seeds reserved for one stage.
    fn seeds(&self, cmd: Command) -> impl RngCore {
        stream_rng(self.seed, cmd.stream())
    }

    fn artifact(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

pub fn run(cmd: Command, ctx: &RunContext) -> Result<Manifest, CliError> {
    log::info!("{} (seed {})", cmd.name(), ctx.seed);
    let mut stage = StageOutput::begin(&ctx.out)?;
    let outcome = match cmd {
        Command::Simulate => simulate(ctx, &mut stage),
        Command::Hmm => hmm(ctx, &mut stage),
        Command::CalibrateRatings => calibrate_ratings(ctx, &mut stage),
        Command::EstimateRates => estimate_rates(ctx, &mut stage),
        Command::EstimateCredit => estimate_credit(ctx, &mut stage),
        Command::Price => price(ctx, &mut stage),
        Command::Decompose => decompose(ctx, &mut stage),
        Command::Validate => validate(ctx, &mut stage),
        Command::Report => report::write_report(ctx, &mut stage),
    };
    match outcome {
        Ok(()) => stage.commit(cmd.name(), &ctx.loaded.text, ctx.seed),
        Err(CliError::ChecksFailed { failed, total }) => {
            stage.commit(cmd.name(), &ctx.loaded.text, ctx.seed)?;
            Err(CliError::ChecksFailed { failed, total })
        }
        Err(e) => Err(e),
    }
}

/// The configured panel, or the one written by `simulate`.
pub fn load_panel(ctx: &RunContext) -> Result<CurvePanel, CliError> {
    let path = match ctx.loaded.panel_path() {
        Some(p) => p,
        None => {
            let p = ctx.artifact(names::PANEL);
            if !p.exists() {
                return Err(CliError::Input("no panel: set data.panel or run simulate first".into()));
            }
            p
        }
    };
    let (panel, report) = ingest_panel(&path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    if report.unparsable > 0 {
        log::warn!("{}: {} unparsable yields treated as missing", path.display(), report.unparsable);
    }
    if report.out_of_band > 0 {
        log::warn!("{}: {} yields outside the sanity band", path.display(), report.out_of_band);
    }
    Ok(panel)
}

fn csv_writer(stage: &mut StageOutput, name: &str) -> Result<csv::Writer<std::fs::File>, CliError> {
    Ok(csv::Writer::from_path(stage.path(name)?)?)
}

fn simulate(ctx: &RunContext, stage: &mut StageOutput) -> Result<(), CliError> {
    let cfg = &ctx.loaded.config;
    let state = cfg.model_state()?;
    let design = cfg.panel_design(&state.noise)?;
    let seed = ctx.seeds(Command::Simulate).next_u64();
    let sim = simulate_panel(&state.model, &design, seed)?;
    sim.panel.write_csv(&stage.path(names::PANEL)?)?;
    sim.truth.write_csv(&stage.path(names::PANEL_TRUTH)?, &state.model)?;
    log::info!("simulated {} weeks of {} series", sim.panel.n_dates(), sim.panel.series.len());
    Ok(())
}

/// HMM state labels in ascending level order.
pub fn state_labels(k: usize) -> Vec<String> {
    match k {
        1 => vec!["All".into()],
        2 => vec!["L".into(), "H".into()],
        3 => vec!["L".into(), "M".into(), "H".into()],
        _ => (0..k).map(|i| format!("S{i}")).collect(),
    }
}

/// Dates and observation vectors of an HMM group, in percent.
pub fn group_observations(panel: &CurvePanel, group: &str) -> Result<(Vec<NaiveDate>, Vec<DVector<f64>>), CliError> {
    let columns: Vec<Vec<Option<f64>>> = if let Some(seg) = Segment::parse(group) {
        (0..panel.series.len()).filter(|&j| panel.series[j].segment == seg).map(|j| panel.series_values(j)).collect()
    } else {
        let spreads = build_spreads(panel)?;
        let kind = spreads
            .series
            .iter()
            .map(|(k, _)| *k)
            .find(|k| k.to_string().eq_ignore_ascii_case(group) || spread_alias(k, group))
            .ok_or_else(|| CliError::Input(format!("HMM group {group} is not in the panel")))?;
        (0..spreads.series.len())
            .filter(|&j| spreads.series[j].0 == kind)
            .map(|j| spreads.values.iter().map(|row| row[j]).collect())
            .collect()
    };
    if columns.is_empty() {
        return Err(CliError::Input(format!("HMM group {group} is not in the panel")));
    }
    let obs = (0..panel.n_dates())
        .map(|t| DVector::from_iterator(columns.len(), columns.iter().map(|c| c[t].map_or(f64::NAN, |v| 100.0 * v))))
        .collect();
    Ok((panel.dates.clone(), obs))
}

fn spread_alias(kind: &SpreadKind, group: &str) -> bool {
    match kind {
        SpreadKind::Corporate(s) => format!("{}-CDB", s.label()).eq_ignore_ascii_case(group),
        SpreadKind::PolicyBank => false,
    }
}

fn hmm(ctx: &RunContext, stage: &mut StageOutput) -> Result<(), CliError> {
    let settings = &ctx.loaded.config.hmm;
    let panel = load_panel(ctx)?;
    let mut seeds = ctx.seeds(Command::Hmm);
    let kind = settings.covariance();
    let labels = state_labels(settings.classify);
    let mut fits = csv_writer(stage, names::HMM_FIT)?;
    fits.write_record([
        "group",
        "states",
        "dim",
        "observations",
        "loglik",
        "aic",
        "bic",
        "iterations",
        "converged",
        "degenerate",
    ])?;
    let mut moments = csv_writer(stage, names::HMM_MOMENTS)?;
    moments.write_record(["group", "state", "label", "count", "weight", "mean_level_pct", "dispersion"])?;
    let mut durations = csv_writer(stage, names::HMM_DURATIONS)?;
    durations.write_record(["group", "state", "label", "stay_probability", "duration_years"])?;
    let mut classes = csv_writer(stage, names::HMM_CLASSIFICATION)?;
    let mut header = vec!["date".to_string(), "group".into(), "state".into()];
    header.extend(labels.iter().map(|l| format!("prob_{l}")));
    classes.write_record(&header)?;

    for group in &settings.groups {
        let (dates, obs) = group_observations(&panel, group)?;
        let dim = obs[0].len();
        let config = |k: usize, seed: u64| FitConfig {
            k,
            restarts: settings.restarts,
            max_iter: settings.max_iter,
            tol: settings.tol,
            covariance: kind,
            seed,
        };
        let mut chosen: Option<HmmFit> = None;
        for &k in &settings.states {
            let fit = fit_hmm(&obs, &config(k, seeds.next_u64()))?;
            let (aic, bic) = information_criteria(fit.loglik, k, dim, fit.kept.len(), kind);
            let degenerate: Vec<String> = fit.degenerate.iter().map(|d| d.to_string()).collect();
            fits.write_record([
                group.clone(),
                k.to_string(),
                dim.to_string(),
                fit.kept.len().to_string(),
                fit.loglik.to_string(),
                aic.to_string(),
                bic.to_string(),
                fit.iterations.to_string(),
                fit.converged.to_string(),
                degenerate.join(" "),
            ])?;
            if k == settings.classify {
                chosen = Some(fit);
            }
        }
        let fit = match chosen {
            Some(f) => f,
            None => fit_hmm(&obs, &config(settings.classify, seeds.next_u64()))?,
        };
        let kept: Vec<DVector<f64>> = fit.kept.iter().map(|&t| obs[t].clone()).collect();
        let c = classify(&fit.model, &kept)?;
        for m in regime_moments(&c) {
            moments.write_record([
                group.clone(),
                m.state.to_string(),
                labels[m.state].clone(),
                m.count.to_string(),
                m.weight.to_string(),
                m.mean_level.to_string(),
                m.dispersion.to_string(),
            ])?;
        }
        for i in 0..settings.classify {
            let stay = c.model.trans.view((i, i), (1, 1)).into_owned();
            let years = regime_durations(&stay, WEEK).map_or_else(|_| "inf".to_string(), |d| d[0].to_string());
            durations.write_record([
                group.clone(),
                i.to_string(),
                labels[i].clone(),
                stay[(0, 0)].to_string(),
                years,
            ])?;
        }
        for (row, &t) in fit.kept.iter().enumerate() {
            let mut rec = vec![dates[t].to_string(), group.clone(), labels[c.labels[row]].clone()];
            rec.extend(c.probs[row].iter().map(|p| p.to_string()));
            classes.write_record(&rec)?;
        }
        log::info!("hmm {group}: {} observations, {} states", kept.len(), settings.classify);
    }
    for w in [&mut fits, &mut moments, &mut durations, &mut classes] {
        w.flush()?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct RatingsSummary {
    labels: Vec<String>,
    calibrated_pi: Option<Vec<f64>>,
    embedding_error: f64,
    modes: Vec<f64>,
    min_weight: f64,
    max_weight_row_sum_error: f64,
    absorbing_column_residual: f64,
    reconstruction_error: f64,
}

fn matrix_csv(stage: &mut StageOutput, name: &str, labels: &[String], m: &DMatrix<f64>) -> Result<(), CliError> {
    let mut w = csv_writer(stage, name)?;
    let mut header = vec!["from".to_string()];
    header.extend(labels.iter().take(m.ncols()).cloned());
    w.write_record(&header)?;
    for i in 0..m.nrows() {
        let mut rec = vec![labels[i].clone()];
        rec.extend(m.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn calibrate_ratings(ctx: &RunContext, stage: &mut StageOutput) -> Result<(), CliError> {
    let ratings =
        ctx.loaded.config.model.ratings.as_ref().ok_or_else(|| CliError::Config("no [model.ratings]".into()))?;
    let setup = ratings.setup()?;
    let g = &setup.model.generator;
    let lando = &setup.model.lando;
    matrix_csv(stage, "ratings_transition_q.csv", &g.labels, &setup.risk_neutral.p)?;
    matrix_csv(stage, names::RATINGS_GENERATOR, &g.labels, &g.full_generator())?;
    let mut w = csv_writer(stage, names::RATINGS_LANDO)?;
    let mut header = vec!["rating".to_string()];
    header.extend((0..lando.modes.len()).map(|j| format!("mode_{j}")));
    w.write_record(&header)?;
    let mut rec = vec!["eigenvalue".to_string()];
    rec.extend(lando.modes.iter().map(|d| d.to_string()));
    w.write_record(&rec)?;
    for i in 0..g.n_ratings() {
        let mut rec = vec![g.labels[i].clone()];
        rec.extend(lando.weights.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    let summary = RatingsSummary {
        labels: g.labels.clone(),
        calibrated_pi: setup.pi.clone(),
        embedding_error: setup.embedding_error,
        modes: lando.modes.iter().copied().collect(),
        min_weight: lando.min_weight,
        max_weight_row_sum_error: (0..g.n_ratings())
            .map(|i| (lando.weights.row(i).sum() - 1.0).abs())
            .fold(0.0, f64::max),
        absorbing_column_residual: lando.absorbing_column_residual,
        reconstruction_error: lando.reconstruction_error,
    };
    stage.write_json(names::RATINGS_JSON, &summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartSummary {
    pub loglik: f64,
    pub evals: usize,
    pub converged: bool,
}

/// Serialized stage estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEstimates {
    pub stage: String,
    pub names: Vec<String>,
    pub transforms: Vec<String>,
    pub estimates: Vec<f64>,
    /// Unconstrained-scale values.
    pub z: Vec<f64>,
    pub loglik: f64,
    pub start_loglik: f64,
    pub converged: bool,
    pub robust_se: Option<Vec<f64>>,
    pub bootstrap_se: Option<Vec<f64>>,
    pub starts: Vec<StartSummary>,
    pub seed: u64,
}

impl StageEstimates {
    fn from_result(r: &EstimationResult) -> Self {
        Self {
            stage: r.stage.to_string(),
            names: r.names.clone(),
            transforms: r.transforms.iter().map(|t| t.label().to_string()).collect(),
            estimates: r.estimates.clone(),
            z: r.z.clone(),
            loglik: r.loglik,
            start_loglik: r.start_loglik,
            converged: r.converged,
            robust_se: r.robust_se(),
            bootstrap_se: r.bootstrap_se(),
            starts: r
                .starts
                .iter()
                .map(|s| StartSummary { loglik: s.loglik, evals: s.evals, converged: s.converged })
                .collect(),
            seed: r.seed,
        }
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
    }

    /// Writes the estimates into `state`.
    pub fn apply(&self, state: &mut ModelState) -> Result<(), CliError> {
        for (name, &v) in self.names.iter().zip(&self.estimates) {
            let target = state.parse_target(name).map_err(|e| CliError::Input(e.to_string()))?;
            state.set(target, v)?;
        }
        Ok(())
    }

    fn write_csv(&self, stage: &mut StageOutput, name: &str) -> Result<(), CliError> {
        let mut w = csv_writer(stage, name)?;
        w.write_record(["parameter", "estimate", "robust_se", "bootstrap_se"])?;
        for (i, n) in self.names.iter().enumerate() {
            let se = |v: &Option<Vec<f64>>| v.as_ref().map_or_else(String::new, |s| s[i].to_string());
            w.write_record([n.clone(), self.estimates[i].to_string(), se(&self.robust_se), se(&self.bootstrap_se)])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn param_vector(state: &ModelState, stage: Stage, free: &[String]) -> Result<ParamVector, CliError> {
    if free.is_empty() {
        return Err(CliError::Config(format!("no free parameters for the {stage} stage")));
    }
    ParamVector::from_names(state, stage, free).map_err(|e| match e {
        EstimationError::UnknownParameter(_) | EstimationError::InvalidConfig(_) => CliError::Config(e.to_string()),
        other => other.into(),
    })
}

/// Collapses the rate chain to one regime whose factor parameters, risk
/// prices, pass-through, and noise are stationary-probability averages. The
/// regime keeps the first rate label.
pub fn single_regime_template(state: &ModelState) -> Result<ModelState, CliError> {
    let m = &state.model;
    let w: Vec<f64> = stationary_distribution(&m.qr)
        .map(|p| p.iter().copied().collect())
        .unwrap_or_else(|_| vec![1.0 / m.n_rate() as f64; m.n_rate()]);
    let avg = |f: &dyn Fn(usize) -> f64| -> f64 { w.iter().enumerate().map(|(s, ws)| ws * f(s)).sum() };
    let factor = |k: usize| -> Result<FactorSpec, CliError> {
        let p = |s: usize| m.rate_factors[s][k].physical;
        let physical = GcirParams::new(
            avg(&|s| p(s).kappa),
            avg(&|s| p(s).theta),
            avg(&|s| p(s).alpha),
            avg(&|s| p(s).beta),
            Measure::Physical,
        )
        .map_err(|e| CliError::Compute(e.to_string()))?;
        FactorSpec::new(physical, RiskPrice(avg(&|s| m.rate_factors[s][k].lambda.0)))
            .map_err(|e| CliError::Compute(e.to_string()))
    };
    let passthrough = DMatrix::from_fn(1, m.n_credit(), |_, c| avg(&|s| m.passthrough[(s, c)]));
    let model = ModelSpec::new(
        vec![[factor(0)?, factor(1)?, factor(2)?]],
        m.credit_factors.clone(),
        CtmcGenerator::single(&m.qr.labels()[0]),
        m.qc.clone(),
        passthrough,
        m.rating.clone(),
        m.grid_delta,
    )?;
    let mut noise = state.noise.clone();
    noise.rate_sd = vec![avg(&|s| state.noise.rate_sd[s])];
    Ok(ModelState { model, noise })
}

fn error_rows(w: &mut csv::Writer<std::fs::File>, model: &str, stats: &[ErrorStats]) -> Result<(), CliError> {
    for s in stats {
        w.write_record([
            s.series.segment.label().to_string(),
            s.series.maturity.to_string(),
            model.to_string(),
            s.mean_bp.to_string(),
            s.sd_bp.to_string(),
            s.rrmse.to_string(),
            s.count.to_string(),
        ])?;
    }
    Ok(())
}

fn rate_filtered_csv(
    stage: &mut StageOutput,
    panel: &CurvePanel,
    m: &ModelSpec,
    out: &RateFilterOutput,
) -> Result<(), CliError> {
    let probs: Vec<Vec<f64>> = out.summaries.iter().map(|s| s.probs.clone()).collect();
    let states: Vec<_> = out.summaries.iter().map(collapsed_rate_state).collect();
    write_filter_csv(
        &stage.path(names::RATE_FILTERED)?,
        &panel.dates,
        m.qr.labels(),
        &probs,
        &states,
        &["x1", "x2", "x3"],
        &out.contributions,
    )?;
    Ok(())
}

fn estimate_rates(ctx: &RunContext, stage: &mut StageOutput) -> Result<(), CliError> {
    let cfg = &ctx.loaded.config;
    let settings = &cfg.estimation.rates;
    let template = cfg.model_state()?;
    let panel = load_panel(ctx)?;
    let filter = cfg.filter.filter();
    let params = param_vector(&template, Stage::Rate, &settings.free)?;
    let mut seeds = ctx.seeds(Command::EstimateRates);
    let objective = RateStage { panel: panel.clone(), template: template.clone(), params: params.clone(), filter };
    let optimizer = cfg.optimizer.optimizer(seeds.next_u64());
    let mut est = estimate(&objective, &params, &template, &optimizer)?;
    log::info!("rate stage: loglik {:.4} from {:.4}", est.loglik, est.start_loglik);
    if settings.sandwich {
        let s = rate_sandwich(&objective, &est.z, &SandwichConfig::default())?;
        if s.singular {
            log::warn!("rate-stage Hessian is singular; standard errors use its pseudo-inverse");
        }
        est.robust_cov = Some(s.cov);
    }
    let boot_seed = seeds.next_u64();
    if let Some(b) = settings.bootstrap {
        let bc = BootstrapConfig { block_len: b.block_len, reps: b.reps, seed: boot_seed, optimizer };
        let r = block_bootstrap(&objective, &est.z, &params.scales(&est.z), &bc)?;
        log::info!("rate bootstrap: {} of {} replicates failed", r.failed, b.reps);
        est.bootstrap_cov = Some(r.cov);
    }
    let summary = StageEstimates::from_result(&est);
    stage.write_json(names::RATE_ESTIMATES, &summary)?;
    summary.write_csv(stage, names::RATE_ESTIMATES_CSV)?;

    let fitted = params.apply(&template, &est.z)?;
    let out = rate_block_filter(&panel, &fitted.model, &fitted.noise, &filter)?;
    rate_filtered_csv(stage, &panel, &fitted.model, &out)?;

    let mut w = csv_writer(stage, names::PRICING_ERRORS)?;
    w.write_record(["segment", "maturity", "model", "mean_bp", "sd_bp", "rrmse", "count"])?;
    let (columns, fit) = fitted_sovereign_yields(&panel, &fitted.model, &out)?;
    error_rows(&mut w, "switching", &pricing_error_stats(&panel, &columns, &fit))?;
    if settings.benchmark && template.model.n_rate() > 1 {
        let single = single_regime_template(&template)?;
        let names: Vec<String> = settings.free.iter().filter(|n| single.parse_target(n).is_ok()).cloned().collect();
        let fitted_single = if names.is_empty() {
            single
        } else {
            let p1 = param_vector(&single, Stage::Rate, &names)?;
            let obj1 = RateStage { panel: panel.clone(), template: single.clone(), params: p1.clone(), filter };
            let e1 = estimate(&obj1, &p1, &single, &cfg.optimizer.optimizer(seeds.next_u64()))?;
            log::info!("single-regime benchmark: loglik {:.4}", e1.loglik);
            p1.apply(&single, &e1.z)?
        };
        let out1 = rate_block_filter(&panel, &fitted_single.model, &fitted_single.noise, &filter)?;
        let (columns, fit) = fitted_sovereign_yields(&panel, &fitted_single.model, &out1)?;
        error_rows(&mut w, "single-regime", &pricing_error_stats(&panel, &columns, &fit))?;
    }
    w.flush()?;
    Ok(())
}

fn rate_estimates(ctx: &RunContext) -> Result<StageEstimates, CliError> {
    let path = ctx.artifact(names::RATE_ESTIMATES);
    if !path.exists() {
        return Err(CliError::Input("no rate estimates: run estimate-rates first".into()));
    }
    StageEstimates::read(&path)
}

fn estimate_credit(ctx: &RunContext, stage: &mut StageOutput) -> Result<(), CliError> {
    let cfg = &ctx.loaded.config;
    let settings = &cfg.estimation.credit;
    let base = cfg.model_state()?;
    let rates = rate_estimates(ctx)?;
    let mut template = base.clone();
    rates.apply(&mut template)?;
    let panel = load_panel(ctx)?;
    let filter = cfg.filter.filter();
    let params = param_vector(&template, Stage::Credit, &settings.free)?;
    let mut seeds = ctx.seeds(Command::EstimateCredit);
    let objective = CreditStage::new(panel.clone(), template.clone(), params.clone(), filter)?;
    let optimizer = cfg.optimizer.optimizer(seeds.next_u64());
    let mut est = estimate(&objective, &params, &template, &optimizer)?;
    log::info!("credit stage: loglik {:.4} from {:.4}", est.loglik, est.start_loglik);
    if settings.sandwich {
        let rate_params = param_vector(&base, Stage::Rate, &rates.names)?;
        let rate_stage = RateStage { panel: panel.clone(), template: base.clone(), params: rate_params, filter };
        let s = joint_sandwich(&rate_stage, &rates.z, &objective, &est.z, &SandwichConfig::default())?;
        if s.singular {
            log::warn!("joint Hessian is singular; standard errors use its pseudo-inverse");
        }
        let n1 = rates.z.len();
        let n2 = est.z.len();
        est.robust_cov = Some(s.cov.view((n1, n1), (n2, n2)).into_owned());
    }
    let boot_seed = seeds.next_u64();
    if let Some(b) = settings.bootstrap {
        let bc = BootstrapConfig { block_len: b.block_len, reps: b.reps, seed: boot_seed, optimizer };
        let r = block_bootstrap(&objective, &est.z, &params.scales(&est.z), &bc)?;
        log::info!("credit bootstrap: {} of {} replicates failed", r.failed, b.reps);
        est.bootstrap_cov = Some(r.cov);
    }
    let summary = StageEstimates::from_result(&est);
    stage.write_json(names::CREDIT_ESTIMATES, &summary)?;
    summary.write_csv(stage, names::CREDIT_ESTIMATES_CSV)?;

    let fitted = params.apply(&template, &est.z)?;
    let out = credit_block_filter(&panel, &fitted.model, &fitted.noise, &objective.rate, &filter)?;
    let states: Vec<_> =
        out.conditional.iter().zip(&objective.rate).map(|(c, r)| collapsed_credit_state(r, c)).collect();
    write_filter_csv(
        &stage.path(names::CREDIT_FILTERED)?,
        &panel.dates,
        fitted.model.qc.labels(),
        &out.marginal,
        &states,
        &["x4"],
        &out.contributions,
    )?;
    Ok(())
}

/// The model template with any stage estimates found in the output
/// directory applied, and which were found.
fn estimated_model(ctx: &RunContext) -> Result<(ModelState, Vec<String>), CliError> {
    let mut state = ctx.loaded.config.model_state()?;
    let mut used = Vec::new();
    for name in [names::RATE_ESTIMATES, names::CREDIT_ESTIMATES] {
        let path = ctx.artifact(name);
        if path.exists() {
            StageEstimates::read(&path)?.apply(&mut state)?;
            used.push(name.to_string());
        }
    }
    Ok((state, used))
}

#[derive(Debug, Serialize)]
struct PriceSummary {
    state: [f64; 4],
    beliefs: Vec<f64>,
    estimates_used: Vec<String>,
    positive_yields: bool,
    increasing_in_rating: bool,
    violations: Vec<String>,
}

fn joint_beliefs(m: &ModelSpec, configured: &Option<Vec<f64>>) -> Result<Vec<f64>, CliError> {
    let b = match configured {
        Some(b) => b.clone(),
        None => match stationary_distribution(&m.joint_generator()) {
            Ok(p) => p.iter().copied().collect(),
            Err(_) => vec![1.0 / m.n_joint() as f64; m.n_joint()],
        },
    };
    let total: f64 = b.iter().sum();
    if b.len() != m.n_joint() || b.iter().any(|v| !(*v >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(CliError::Config(format!("price.beliefs must be {} probabilities summing to one", m.n_joint())));
    }
    Ok(b)
}

fn price(ctx: &RunContext, stage: &mut StageOutput) -> Result<(), CliError> {
    let settings = &ctx.loaded.config.price;
    let (state, used) = estimated_model(ctx)?;
    let m = &state.model;
    let x = settings.state.unwrap_or_else(|| m.reference_state());
    let beliefs = joint_beliefs(m, &settings.beliefs)?;
    let nc = m.n_credit();
    let rate_beliefs: Vec<f64> = (0..m.n_rate()).map(|r| beliefs[r * nc..(r + 1) * nc].iter().sum()).collect();
    let ym = YieldModel::build(m, &settings.maturities, m.rating.is_some(), settings.pricing.scheme(), &x)?;
    let joint_labels = m.joint_generator().labels().to_vec();

    let mut w = csv_writer(stage, names::PRICES)?;
    w.write_record(["instrument", "maturity", "regime", "price", "yield"])?;
    let mut violations = Vec::new();
    let mut positive = true;
    let mut record =
        |w: &mut csv::Writer<std::fs::File>, inst: &str, tau: f64, regime: &str, p: f64| -> Result<f64, CliError> {
            let y = if p > 0.0 { -p.ln() / tau } else { f64::NAN };
            if !(y > 0.0) {
                positive = false;
            }
            w.write_record([inst.to_string(), tau.to_string(), regime.to_string(), p.to_string(), y.to_string()])?;
            Ok(y)
        };
    let ratings = m.rating.as_ref().map(|r| r.generator.labels.clone()).unwrap_or_default();
    for (k, &tau) in settings.maturities.iter().enumerate() {
        for (curve, name) in [(Curve::Cgb, "CGB"), (Curve::Cdb, "CDB")] {
            let values: Vec<f64> = (0..m.n_rate()).map(|r| ym.sovereign_price(curve, k, r, &x)).collect();
            for (r, p) in values.iter().enumerate() {
                record(&mut w, name, tau, &m.qr.labels()[r], *p)?;
            }
            let v = RegimePriceVector { values, maturity: tau, labels: m.qr.labels().to_vec() };
            record(&mut w, name, tau, "mixed", mix_prices(&v, &rate_beliefs)?)?;
        }
        let mut previous: Option<Vec<f64>> = None;
        for i in 0..ym.n_ratings() {
            let values: Vec<f64> = (0..m.n_joint()).map(|s| ym.corporate_price(i, k, s / nc, s % nc, &x)).collect();
            let mut yields = Vec::with_capacity(values.len() + 1);
            for (s, p) in values.iter().enumerate() {
                yields.push(record(&mut w, &ratings[i], tau, &joint_labels[s], *p)?);
            }
            let v = RegimePriceVector { values, maturity: tau, labels: joint_labels.clone() };
            yields.push(record(&mut w, &ratings[i], tau, "mixed", mix_prices(&v, &beliefs)?)?);
            if let Some(prev) = &previous {
                for (s, (a, b)) in prev.iter().zip(&yields).enumerate() {
                    if !(b > a) {
                        let regime = joint_labels.get(s).map_or("mixed", String::as_str);
                        violations.push(format!("{} not above {} at {tau}y in {regime}", ratings[i], ratings[i - 1]));
                    }
                }
            }
            previous = Some(yields);
        }
    }
    w.flush()?;
    let summary = PriceSummary {
        state: x,
        beliefs,
        estimates_used: used,
        positive_yields: positive,
        increasing_in_rating: violations.is_empty(),
        violations,
    };
    if !summary.increasing_in_rating || !summary.positive_yields {
        log::warn!(
            "price: {} ordering violations; positive yields {}",
            summary.violations.len(),
            summary.positive_yields
        );
    }
    stage.write_json(names::PRICE_JSON, &summary)
}

/// Smoothed state probabilities of one HMM group by date, with the state
/// labels, from the classification artifact.
pub fn read_classification(path: &Path, group: &str) -> Result<(Vec<String>, BTreeMap<NaiveDate, Vec<f64>>), CliError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let headers = rdr.headers()?.clone();
    let labels: Vec<String> = headers.iter().skip(3).map(|h| h.trim_start_matches("prob_").to_string()).collect();
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        if &rec[1] != group {
            continue;
        }
        let date = NaiveDate::parse_from_str(&rec[0], "%Y-%m-%d").map_err(|e| CliError::Input(e.to_string()))?;
        let probs = rec
            .iter()
            .skip(3)
            .map(|v| v.parse::<f64>().map_err(|e| CliError::Input(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        out.insert(date, probs);
    }
    Ok((labels, out))
}

#[derive(Debug, Serialize)]
struct DecompositionSummary {
    observations: usize,
    max_reconstruction_error: f64,
    regime_weights: Option<String>,
}

fn decompose(ctx: &RunContext, stage: &mut StageOutput) -> Result<(), CliError> {
    let panel = load_panel(ctx)?;
    let classification = ctx.artifact(names::HMM_CLASSIFICATION);
    let weights = if classification.exists() {
        let (labels, probs) = read_classification(&classification, "CGB")?;
        (!probs.is_empty()).then_some((labels, probs))
    } else {
        None
    };
    let mut w = csv_writer(stage, names::DECOMPOSITION)?;
    w.write_record([
        "date",
        "segment",
        "maturity",
        "sovereign",
        "policy_bank_spread",
        "corporate_spread",
        "corporate_yield",
        "reconstruction_error",
    ])?;
    let mut s = csv_writer(stage, names::DECOMPOSITION_SUMMARY)?;
    s.write_record(["segment", "maturity", "regime", "weight", "sovereign", "policy_bank_spread", "corporate_spread"])?;
    let mut max_err = 0.0f64;
    let mut count = 0;
    for seg in panel.segments().into_iter().filter(|s| s.is_corporate()) {
        for mat in panel.maturities(seg) {
            let (Some(jg), Some(jd), Some(jc)) =
                (panel.column(Segment::Cgb, mat), panel.column(Segment::Cdb, mat), panel.column(seg, mat))
            else {
                return Err(CliError::Input(format!("{seg} {mat}y has no matching CGB and CDB yields")));
            };
            let mut rows = Vec::new();
            for (t, row) in panel.values.iter().enumerate() {
                let (Some(g), Some(d), Some(c)) = (row[jg], row[jd], row[jc]) else { continue };
                let comp = spread_decomposition(g, d, c);
                let err = (comp.corporate_yield() - c).abs();
                max_err = max_err.max(err);
                w.write_record([
                    panel.dates[t].to_string(),
                    seg.label().to_string(),
                    mat.to_string(),
                    comp.sovereign.to_string(),
                    comp.policy_bank_spread.to_string(),
                    comp.corporate_spread.to_string(),
                    c.to_string(),
                    err.to_string(),
                ])?;
                rows.push((panel.dates[t], comp));
                count += 1;
            }
            if rows.is_empty() {
                continue;
            }
            let mut regimes: Vec<(String, Vec<f64>)> = vec![("All".into(), vec![1.0; rows.len()])];
            if let Some((labels, probs)) = &weights {
                for (k, label) in labels.iter().enumerate() {
                    regimes
                        .push((label.clone(), rows.iter().map(|(d, _)| probs.get(d).map_or(0.0, |p| p[k])).collect()));
                }
            }
            for (label, wts) in regimes {
                let mass: f64 = wts.iter().sum();
                if !(mass > 0.0) {
                    continue;
                }
                let mean = |f: &dyn Fn(&rsgcir_core::pricing::SpreadComponents) -> f64| -> Result<f64, CliError> {
                    let v: Vec<f64> = rows.iter().map(|(_, c)| f(c)).collect();
                    Ok(rsgcir_core::pricing::prob_weighted_mean(&v, &wts)?)
                };
                s.write_record([
                    seg.label().to_string(),
                    mat.to_string(),
                    label,
                    mass.to_string(),
                    mean(&|c| c.sovereign)?.to_string(),
                    mean(&|c| c.policy_bank_spread)?.to_string(),
                    mean(&|c| c.corporate_spread)?.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    s.flush()?;
    if count == 0 {
        return Err(CliError::Input("panel has no corporate yields to decompose".into()));
    }
    let summary = DecompositionSummary {
        observations: count,
        max_reconstruction_error: max_err,
        regime_weights: weights.map(|_| "hmm:CGB".to_string()),
    };
    stage.write_json(names::DECOMPOSITION_JSON, &summary)
}

#[derive(Debug, Serialize)]
struct ValidateSummary {
    all_passed: bool,
    checks: Vec<checks::CheckResult>,
}

fn validate(ctx: &RunContext, stage: &mut StageOutput) -> Result<(), CliError> {
    let results = checks::run_criteria(ctx, &ctx.loaded.config.validate.criteria);
    let failed = results.iter().filter(|r| !r.passed).count();
    let total = results.len();
    stage.write_json(names::VALIDATE, &ValidateSummary { all_passed: failed == 0, checks: results })?;
    if failed > 0 {
        return Err(CliError::ChecksFailed { failed, total });
    }
    Ok(())
}

/// The stages of the end-to-end run, in order.
pub const END_TO_END: [Command; 6] =
    [Command::Simulate, Command::Hmm, Command::EstimateRates, Command::EstimateCredit, Command::Price, Command::Report];
