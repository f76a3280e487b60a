//! Run configuration: a TOML document holding the model template and the
//! settings of every pipeline stage. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use nalgebra::DMatrix;
use rsgcir_core::affine::{GcirParams, Measure, RiskPrice};
use rsgcir_core::optim::NelderMeadConfig;
use rsgcir_core::panel::{Segment, DEFAULT_MATURITIES};
use rsgcir_core::pricing::{FactorSpec, ModelSpec, PricingScheme, RatingModel, DEFAULT_TERM_CAP};
use rsgcir_core::ratings::{
    adjust_default_intensity, calibrate_pi, embed_generator, embedding_error, lando_decomposition,
    risk_neutral_distortion, spread_implied_default_prob, RatingGenerator, RatingMeasure, RatingTransition,
    WeightPolicy,
};
use rsgcir_core::regimes::CtmcGenerator;
use rsgcir_core::simulate::{NoiseConfig, PanelDesign};
use rsgcir_filter::blocks::FilterConfig;
use rsgcir_filter::estimation::{ModelState, OptimizerConfig};
use rsgcir_filter::ukf::UtParams;
use rsgcir_hmm::CovarianceKind;
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub model: ModelConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub simulate: SimulateConfig,
    #[serde(default)]
    pub filter: FilterSettings,
    #[serde(default)]
    pub optimizer: OptimizerSettings,
    #[serde(default)]
    pub estimation: EstimationConfig,
    #[serde(default)]
    pub hmm: HmmSettings,
    #[serde(default)]
    pub price: PriceSettings,
    #[serde(default)]
    pub validate: ValidateSettings,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorConfig {
    pub kappa: f64,
    pub theta: f64,
    pub alpha: f64,
    pub beta: f64,
    #[serde(default)]
    pub lambda: f64,
}

impl FactorConfig {
    fn spec(&self, name: &str) -> Result<FactorSpec, CliError> {
        let p = GcirParams::new(self.kappa, self.theta, self.alpha, self.beta, Measure::Physical)
            .map_err(|e| CliError::Config(format!("{name}: {e}")))?;
        FactorSpec::new(p, RiskPrice(self.lambda)).map_err(|e| CliError::Config(format!("{name}: {e}")))
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateRegime {
    pub label: String,
    /// Measurement noise sd of CGB and CDB yields in this regime.
    pub noise_sd: f64,
    pub x1: FactorConfig,
    pub x2: FactorConfig,
    pub x3: FactorConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreditRegime {
    pub label: String,
    /// Measurement noise sd of corporate yields in this regime.
    pub noise_sd: f64,
    pub x4: FactorConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeasureName {
    Physical,
    RiskNeutral,
}

/// Risk-neutral default probabilities from spreads: row `i` holds rating
/// `i`'s spreads at horizons of 1, 2, ... years.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PiCalibration {
    pub spreads: Vec<Vec<f64>>,
    pub recovery: f64,
    #[serde(default)]
    pub weights: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatingsConfig {
    /// Rating labels with the default state last.
    pub labels: Vec<String>,
    pub one_year: Vec<Vec<f64>>,
    pub measure: MeasureName,
    #[serde(default)]
    pub delta_nu: Option<Vec<f64>>,
    /// Required for a physical matrix, not allowed for a risk-neutral one.
    #[serde(default)]
    pub calibration: Option<PiCalibration>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub rate_regimes: Vec<RateRegime>,
    pub credit_regimes: Vec<CreditRegime>,
    /// Off-diagonal intensities per year; diagonals are filled in.
    pub rate_generator: Vec<Vec<f64>>,
    pub credit_generator: Vec<Vec<f64>>,
    /// Rows are rate regimes, columns credit regimes.
    pub passthrough: Vec<Vec<f64>>,
    #[serde(default)]
    pub ratings: Option<RatingsConfig>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Observed panel; relative paths resolve against the config file. When
    /// absent, stages read the `panel.csv` written by `simulate`.
    #[serde(default)]
    pub panel: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeName {
    #[default]
    Mixture,
    Collapsed,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PricingSettings {
    #[serde(default)]
    pub scheme: SchemeName,
    #[serde(default = "default_max_terms")]
    pub max_terms: usize,
}

fn default_max_terms() -> usize {
    DEFAULT_TERM_CAP
}

impl Default for PricingSettings {
    fn default() -> Self {
        Self { scheme: SchemeName::Mixture, max_terms: DEFAULT_TERM_CAP }
    }
}

impl PricingSettings {
    pub fn scheme(&self) -> PricingScheme {
        match self.scheme {
            SchemeName::Mixture => PricingScheme::Mixture { max_terms: self.max_terms },
            SchemeName::Collapsed => PricingScheme::Collapsed,
        }
    }
}

fn default_maturities() -> Vec<f64> {
    DEFAULT_MATURITIES.to_vec()
}

fn all_segments() -> Vec<String> {
    Segment::ALL.iter().map(|s| s.label().to_string()).collect()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub start: NaiveDate,
    pub weeks: usize,
    #[serde(default = "default_maturities")]
    pub maturities: Vec<f64>,
    #[serde(default = "all_segments")]
    pub segments: Vec<String>,
    pub substeps: usize,
    pub burn_in: usize,
    #[serde(default)]
    pub pricing: PricingSettings,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            start: NaiveDate::from_ymd_opt(2014, 1, 3).expect("valid date"),
            weeks: 550,
            maturities: default_maturities(),
            segments: all_segments(),
            substeps: 16,
            burn_in: 52,
            pricing: PricingSettings::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSettings {
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
}

impl Default for FilterSettings {
    fn default() -> Self {
        let ut = UtParams::default();
        Self { alpha: ut.alpha, beta: ut.beta, kappa: ut.kappa }
    }
}

impl FilterSettings {
    pub fn filter(&self) -> FilterConfig {
        FilterConfig { ut: UtParams { alpha: self.alpha, beta: self.beta, kappa: self.kappa } }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSettings {
    pub starts: usize,
    pub start_spread: f64,
    pub max_evals: usize,
    pub f_tol: f64,
    pub x_tol: f64,
    pub initial_step: f64,
    pub polish_sweeps: usize,
    pub polish_step: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        let d = OptimizerConfig::default();
        Self {
            starts: d.starts,
            start_spread: d.start_spread,
            max_evals: d.nelder_mead.max_evals,
            f_tol: d.nelder_mead.f_tol,
            x_tol: d.nelder_mead.x_tol,
            initial_step: d.nelder_mead.initial_step,
            polish_sweeps: d.polish_sweeps,
            polish_step: d.polish_step,
        }
    }
}

impl OptimizerSettings {
    pub fn optimizer(&self, seed: u64) -> OptimizerConfig {
        OptimizerConfig {
            starts: self.starts,
            start_spread: self.start_spread,
            nelder_mead: NelderMeadConfig {
                max_evals: self.max_evals,
                f_tol: self.f_tol,
                x_tol: self.x_tol,
                initial_step: self.initial_step,
            },
            polish_sweeps: self.polish_sweeps,
            polish_step: self.polish_step,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapSettings {
    pub block_len: usize,
    pub reps: usize,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSettings {
    /// Free parameter names; everything else stays at the template.
    #[serde(default)]
    pub free: Vec<String>,
    /// Sandwich standard errors; for the credit stage they are joint with
    /// the rate stage.
    #[serde(default = "yes")]
    pub sandwich: bool,
    #[serde(default)]
    pub bootstrap: Option<BootstrapSettings>,
    /// Rate stage only: also fit a single-regime benchmark for the
    /// pricing-error comparison.
    #[serde(default = "yes")]
    pub benchmark: bool,
}

impl Default for StageSettings {
    fn default() -> Self {
        Self { free: Vec::new(), sandwich: true, bootstrap: None, benchmark: true }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimationConfig {
    #[serde(default)]
    pub rates: StageSettings,
    #[serde(default)]
    pub credit: StageSettings,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovarianceName {
    #[default]
    Full,
    Diagonal,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HmmSettings {
    /// Candidate state counts.
    pub states: Vec<usize>,
    /// State count used for classification, moments, and durations.
    pub classify: usize,
    pub restarts: usize,
    pub max_iter: usize,
    pub tol: f64,
    #[serde(default)]
    pub covariance: CovarianceName,
    /// Observation groups: a segment (`CGB`) for its yield curve, or a
    /// spread (`CDB-CGB`, `AAA-CDB`, ...) across matched maturities.
    pub groups: Vec<String>,
}

impl Default for HmmSettings {
    fn default() -> Self {
        Self {
            states: vec![1, 2, 3],
            classify: 2,
            restarts: 10,
            max_iter: 500,
            tol: 1e-8,
            covariance: CovarianceName::Full,
            groups: vec!["CGB".into(), "CDB-CGB".into(), "AAA-CDB".into()],
        }
    }
}

impl HmmSettings {
    pub fn covariance(&self) -> CovarianceKind {
        match self.covariance {
            CovarianceName::Full => CovarianceKind::Full,
            CovarianceName::Diagonal => CovarianceKind::Diagonal,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriceSettings {
    #[serde(default = "default_maturities")]
    pub maturities: Vec<f64>,
    #[serde(default)]
    pub pricing: PricingSettings,
    /// Factor state; defaults to the model's reference state.
    #[serde(default)]
    pub state: Option<[f64; 4]>,
    /// Joint regime beliefs, rate-major; defaults to the stationary
    /// distribution.
    #[serde(default)]
    pub beliefs: Option<Vec<f64>>,
}

impl Default for PriceSettings {
    fn default() -> Self {
        Self { maturities: default_maturities(), pricing: PricingSettings::default(), state: None, beliefs: None }
    }
}

fn all_criteria() -> Vec<u32> {
    (1..=13).collect()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateSettings {
    #[serde(default = "all_criteria")]
    pub criteria: Vec<u32>,
}

impl Default for ValidateSettings {
    fn default() -> Self {
        Self { criteria: all_criteria() }
    }
}

/// A parsed configuration with the bytes it came from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub text: String,
    /// Directory that relative paths resolve against.
    pub base_dir: PathBuf,
}

impl LoadedConfig {
    pub fn from_path(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_text(text, base_dir)
    }

    pub fn from_text(text: String, base_dir: PathBuf) -> Result<Self, CliError> {
        let config: RunConfig = toml::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?;
        config.check()?;
        Ok(Self { config, text, base_dir })
    }

    pub fn panel_path(&self) -> Option<PathBuf> {
        self.config.data.panel.as_ref().map(|p| if p.is_absolute() { p.clone() } else { self.base_dir.join(p) })
    }
}

fn matrix(rows: &[Vec<f64>], n: usize, m: usize, what: &str) -> Result<DMatrix<f64>, CliError> {
    if rows.len() != n || rows.iter().any(|r| r.len() != m) {
        return Err(CliError::Config(format!("{what} must be {n}x{m}")));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

pub fn parse_segments(labels: &[String]) -> Result<Vec<Segment>, CliError> {
    labels.iter().map(|s| Segment::parse(s).ok_or_else(|| CliError::Config(format!("unknown segment {s}")))).collect()
}

/// Rating system and the intermediate results that produced it.
#[derive(Debug, Clone)]
pub struct RatingSetup {
    /// Calibrated one-year risk-neutral default probabilities, when the
    /// input matrix is physical.
    pub pi: Option<Vec<f64>>,
    pub risk_neutral: RatingTransition,
    pub embedded: RatingGenerator,
    pub embedding_error: f64,
    pub model: RatingModel,
}

impl RatingsConfig {
    pub fn setup(&self) -> Result<RatingSetup, CliError> {
        let k = self.labels.len();
        let p = matrix(&self.one_year, k, k, "ratings.one_year")?;
        let rating_err = |e: rsgcir_core::ratings::RatingError| CliError::Compute(format!("ratings: {e}"));
        let (pi, risk_neutral) = match (self.measure, &self.calibration) {
            (MeasureName::RiskNeutral, None) => (
                None,
                RatingTransition::from_rounded(p, RatingMeasure::RiskNeutral, self.labels.clone())
                    .map_err(rating_err)?,
            ),
            (MeasureName::Physical, Some(cal)) => {
                let pp = RatingTransition::from_rounded(p, RatingMeasure::Physical, self.labels.clone())
                    .map_err(rating_err)?;
                let t_max = cal.spreads.first().map_or(0, Vec::len);
                let spreads = matrix(&cal.spreads, k - 1, t_max, "ratings.calibration.spreads")?;
                let q_imp = DMatrix::from_fn(k - 1, t_max, |i, t| {
                    spread_implied_default_prob(spreads[(i, t)], (t + 1) as f64, cal.recovery)
                });
                let weights = match &cal.weights {
                    Some(w) => matrix(w, k - 1, t_max, "ratings.calibration.weights")?,
                    None => DMatrix::from_element(k - 1, t_max, 1.0),
                };
                let pi = calibrate_pi(&pp, &q_imp, &weights, t_max).map_err(rating_err)?;
                let pq = risk_neutral_distortion(&pp, &pi).map_err(rating_err)?;
                (Some(pi), pq)
            }
            (MeasureName::Physical, None) => {
                return Err(CliError::Config("a physical rating matrix needs [model.ratings.calibration]".into()))
            }
            (MeasureName::RiskNeutral, Some(_)) => {
                return Err(CliError::Config("a risk-neutral rating matrix takes no calibration".into()))
            }
        };
        let embedded = embed_generator(&risk_neutral).map_err(rating_err)?;
        let embedding_error = embedding_error(&embedded, &risk_neutral).map_err(rating_err)?;
        let generator = match &self.delta_nu {
            Some(dn) => adjust_default_intensity(&embedded, dn).map_err(rating_err)?,
            None => embedded.clone(),
        };
        let lando = lando_decomposition(&generator, WeightPolicy::Signed).map_err(rating_err)?;
        if lando.min_weight < 0.0 {
            log::info!("signed Lando weights, minimum {:.4}", lando.min_weight);
        }
        Ok(RatingSetup { pi, risk_neutral, embedded, embedding_error, model: RatingModel { generator, lando } })
    }
}

impl RunConfig {
    fn check(&self) -> Result<(), CliError> {
        let m = &self.model;
        if m.rate_regimes.is_empty() || m.credit_regimes.is_empty() {
            return Err(CliError::Config("at least one rate and one credit regime are required".into()));
        }
        parse_segments(&self.simulate.segments)?;
        if self.hmm.states.is_empty() || self.hmm.states.contains(&0) || self.hmm.classify == 0 {
            return Err(CliError::Config("hmm state counts must be positive".into()));
        }
        if let Some(c) = self.validate.criteria.iter().find(|c| !(1..=13).contains(*c)) {
            return Err(CliError::Config(format!("no acceptance criterion {c}")));
        }
        Ok(())
    }

    /// Builds the model template and measurement noise.
    pub fn model_state(&self) -> Result<ModelState, CliError> {
        let m = &self.model;
        let (nr, nc) = (m.rate_regimes.len(), m.credit_regimes.len());
        let rate_labels: Vec<String> = m.rate_regimes.iter().map(|r| r.label.clone()).collect();
        let credit_labels: Vec<String> = m.credit_regimes.iter().map(|r| r.label.clone()).collect();
        let regime_err = |e: rsgcir_core::regimes::RegimeError| CliError::Config(e.to_string());
        let qr = CtmcGenerator::from_rates(matrix(&m.rate_generator, nr, nr, "model.rate_generator")?, rate_labels)
            .map_err(regime_err)?;
        let qc =
            CtmcGenerator::from_rates(matrix(&m.credit_generator, nc, nc, "model.credit_generator")?, credit_labels)
                .map_err(regime_err)?;
        let rate_factors = m
            .rate_regimes
            .iter()
            .map(|r| {
                Ok([
                    r.x1.spec(&format!("x1.{}", r.label))?,
                    r.x2.spec(&format!("x2.{}", r.label))?,
                    r.x3.spec(&format!("x3.{}", r.label))?,
                ])
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        let credit_factors = m
            .credit_regimes
            .iter()
            .map(|r| r.x4.spec(&format!("x4.{}", r.label)))
            .collect::<Result<Vec<_>, CliError>>()?;
        let rating = m.ratings.as_ref().map(|r| r.setup().map(|s| s.model)).transpose()?;
        let model = ModelSpec::new(
            rate_factors,
            credit_factors,
            qr,
            qc,
            matrix(&m.passthrough, nr, nc, "model.passthrough")?,
            rating,
            rsgcir_core::fixtures::WEEK,
        )
        .map_err(|e| CliError::Config(e.to_string()))?;
        let noise = NoiseConfig {
            rate_sd: m.rate_regimes.iter().map(|r| r.noise_sd).collect(),
            credit_sd: m.credit_regimes.iter().map(|r| r.noise_sd).collect(),
        };
        Ok(ModelState { model, noise })
    }

    pub fn panel_design(&self, noise: &NoiseConfig) -> Result<PanelDesign, CliError> {
        let s = &self.simulate;
        Ok(PanelDesign {
            start: s.start,
            weeks: s.weeks,
            maturities: s.maturities.clone(),
            segments: parse_segments(&s.segments)?,
            noise: noise.clone(),
            substeps: s.substeps,
            burn_in: s.burn_in,
            scheme: s.pricing.scheme(),
        })
    }
}
