//! Stage objectives: the rate-block likelihood, and the credit-block
//! likelihood given the rate block's filtered summaries.

use rsgcir_core::panel::CurvePanel;

use super::bootstrap::Resample;
use super::params::{ModelState, ParamVector};
use super::sandwich::{sandwich_cov, two_stage_sandwich, Sandwich, SandwichConfig};
use super::{maximize, EstimationError, EstimationResult, Objective, OptimizerConfig};
use crate::blocks::{credit_block_filter, rate_block_filter, FilterConfig, RateBlockSummary};

fn resample_panel(panel: &CurvePanel, idx: &[usize]) -> CurvePanel {
    CurvePanel {
        dates: panel.dates.clone(),
        series: panel.series.clone(),
        values: idx.iter().map(|&t| panel.values[t].clone()).collect(),
    }
}

/// Stage one: the rate block's filtered log-likelihood.
#[derive(Debug, Clone)]
pub struct RateStage {
    pub panel: CurvePanel,
    pub template: ModelState,
    pub params: ParamVector,
    pub filter: FilterConfig,
}

impl RateStage {
    pub fn summaries(&self, z: &[f64]) -> Result<Vec<RateBlockSummary>, EstimationError> {
        let s = self.params.apply(&self.template, z)?;
        Ok(rate_block_filter(&self.panel, &s.model, &s.noise, &self.filter)?.summaries)
    }
}

impl Objective for RateStage {
    fn contributions(&self, z: &[f64]) -> Result<Vec<f64>, EstimationError> {
        let s = self.params.apply(&self.template, z)?;
        Ok(rate_block_filter(&self.panel, &s.model, &s.noise, &self.filter)?.contributions)
    }
}

impl Resample for RateStage {
    fn n_dates(&self) -> usize {
        self.panel.n_dates()
    }

    fn resample(&self, idx: &[usize]) -> Result<Self, EstimationError> {
        Ok(Self { panel: resample_panel(&self.panel, idx), ..self.clone() })
    }
}

/// Stage two: the credit block's filtered log-likelihood with the rate
/// summaries held fixed. `template` carries the stage-one estimates.
#[derive(Debug, Clone)]
pub struct CreditStage {
    pub panel: CurvePanel,
    pub template: ModelState,
    pub params: ParamVector,
    pub rate: Vec<RateBlockSummary>,
    pub filter: FilterConfig,
}

impl CreditStage {
    /// Builds the stage with rate summaries filtered under `template`.
    pub fn new(
        panel: CurvePanel,
        template: ModelState,
        params: ParamVector,
        filter: FilterConfig,
    ) -> Result<Self, EstimationError> {
        let rate = rate_block_filter(&panel, &template.model, &template.noise, &filter)?.summaries;
        Ok(Self { panel, template, params, rate, filter })
    }
}

impl Objective for CreditStage {
    fn contributions(&self, z: &[f64]) -> Result<Vec<f64>, EstimationError> {
        let s = self.params.apply(&self.template, z)?;
        Ok(credit_block_filter(&self.panel, &s.model, &s.noise, &self.rate, &self.filter)?.contributions)
    }
}

impl Resample for CreditStage {
    fn n_dates(&self) -> usize {
        self.panel.n_dates()
    }

    /// Rate summaries are refiltered on the resampled dates at the stage-one
    /// estimates.
    fn resample(&self, idx: &[usize]) -> Result<Self, EstimationError> {
        Self::new(resample_panel(&self.panel, idx), self.template.clone(), self.params.clone(), self.filter)
    }
}

/// Maximizes a stage objective from the template values of its parameters.
pub fn estimate<O: Objective>(
    obj: &O,
    params: &ParamVector,
    template: &ModelState,
    cfg: &OptimizerConfig,
) -> Result<EstimationResult, EstimationError> {
    let z0 = params.transformed(template)?;
    let opt = maximize(obj, &z0, &params.scales(&z0), &params.level_indices(), cfg)?;
    Ok(EstimationResult {
        stage: params.stage,
        names: params.names(),
        transforms: params.params.iter().map(|p| p.transform).collect(),
        estimates: params.to_natural(&opt.z),
        z: opt.z,
        loglik: opt.loglik,
        start_loglik: opt.start_loglik,
        converged: opt.converged,
        starts: opt.starts,
        robust_cov: None,
        bootstrap_cov: None,
        seed: cfg.seed,
    })
}

pub fn rate_sandwich(stage: &RateStage, z: &[f64], cfg: &SandwichConfig) -> Result<Sandwich, EstimationError> {
    sandwich_cov(|v: &[f64]| stage.contributions(v), z, cfg)
}

/// Joint sandwich over both stages. Perturbing the rate parameters reruns
/// the rate filter before the credit filter, so the credit block of the
/// result accounts for the rate summaries being estimated.
pub fn joint_sandwich(
    rate: &RateStage,
    z_rate: &[f64],
    credit: &CreditStage,
    z_credit: &[f64],
    cfg: &SandwichConfig,
) -> Result<Sandwich, EstimationError> {
    let second = |z1: &[f64], z2: &[f64]| -> Result<Vec<f64>, EstimationError> {
        let with_rate = rate.params.apply(&credit.template, z1)?;
        let summaries = rate_block_filter(&credit.panel, &with_rate.model, &with_rate.noise, &credit.filter)?.summaries;
        let s = credit.params.apply(&with_rate, z2)?;
        Ok(credit_block_filter(&credit.panel, &s.model, &s.noise, &summaries, &credit.filter)?.contributions)
    };
    two_stage_sandwich(|v: &[f64]| rate.contributions(v), second, z_rate, z_credit, cfg)
}
