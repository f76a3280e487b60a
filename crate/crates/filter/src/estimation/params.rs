//! Named free parameters, their unconstrained transforms, and how they map
//! into a model.
//!
//! Names: `x{1..4}.{kappa,theta,alpha,beta,lambda}.{regime}` (rate regime
//! labels for `x1..x3`, credit labels for `x4`), `qr.{from}.{to}` and
//! `qc.{from}.{to}` for generator intensities, `pass.{rate}.{credit}` for
//! pass-through coefficients, and `noise.rate.{regime}` /
//! `noise.credit.{regime}` for measurement standard deviations.

use std::fmt;

use nalgebra::DMatrix;
use rsgcir_core::affine::{GcirParams, RiskPrice};
use rsgcir_core::pricing::{FactorSpec, ModelSpec};
use rsgcir_core::regimes::CtmcGenerator;
use rsgcir_core::simulate::NoiseConfig;

use super::EstimationError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    LogPositive,
    LogitUnit,
    Identity,
}

impl Transform {
    /// Natural value to the unconstrained scale.
    pub fn forward(self, v: f64) -> f64 {
        match self {
            Transform::LogPositive => v.ln(),
            Transform::LogitUnit => (v / (1.0 - v)).ln(),
            Transform::Identity => v,
        }
    }

    pub fn inverse(self, z: f64) -> f64 {
        match self {
            Transform::LogPositive => z.exp(),
            Transform::LogitUnit => 1.0 / (1.0 + (-z).exp()),
            Transform::Identity => z,
        }
    }

    /// `d inverse / dz`, for delta-method standard errors.
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Transform::LogPositive => z.exp(),
            Transform::LogitUnit => {
                let p = self.inverse(z);
                p * (1.0 - p)
            }
            Transform::Identity => 1.0,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Transform::LogPositive => "log",
            Transform::LogitUnit => "logit",
            Transform::Identity => "identity",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Rate,
    Credit,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Rate => "rate",
            Stage::Credit => "credit",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorField {
    Kappa,
    Theta,
    Alpha,
    Beta,
    Lambda,
}

/// What a free parameter controls.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    /// `factor` is 0-based (`x1` is 0); `regime` indexes the rate chain for
    /// `x1..x3` and the credit chain for `x4`.
    Factor {
        factor: usize,
        regime: usize,
        field: FactorField,
    },
    RateIntensity {
        from: usize,
        to: usize,
    },
    CreditIntensity {
        from: usize,
        to: usize,
    },
    Passthrough {
        rate: usize,
        credit: usize,
    },
    RateNoise(usize),
    CreditNoise(usize),
}

impl Target {
    pub fn stage(self) -> Stage {
        match self {
            Target::Factor { factor, .. } if factor < 3 => Stage::Rate,
            Target::RateIntensity { .. } | Target::RateNoise(_) => Stage::Rate,
            _ => Stage::Credit,
        }
    }

    pub fn default_transform(self) -> Transform {
        match self {
            Target::Factor { field: FactorField::Theta | FactorField::Lambda, .. } | Target::Passthrough { .. } => {
                Transform::Identity
            }
            _ => Transform::LogPositive,
        }
    }
}

/// Everything estimation can change: the pricing model and the
/// measurement noise.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub model: ModelSpec,
    pub noise: NoiseConfig,
}

fn label_index(labels: &[String], s: &str, name: &str) -> Result<usize, EstimationError> {
    labels.iter().position(|l| l == s).ok_or_else(|| EstimationError::UnknownParameter(name.to_string()))
}

impl ModelState {
    pub fn parse_target(&self, name: &str) -> Result<Target, EstimationError> {
        let unknown = || EstimationError::UnknownParameter(name.to_string());
        let parts: Vec<&str> = name.split('.').collect();
        let (rl, cl) = (self.model.qr.labels(), self.model.qc.labels());
        let target = match parts.as_slice() {
            [x, field, regime] if x.starts_with('x') => {
                let factor = match *x {
                    "x1" => 0,
                    "x2" => 1,
                    "x3" => 2,
                    "x4" => 3,
                    _ => return Err(unknown()),
                };
                let field = match *field {
                    "kappa" => FactorField::Kappa,
                    "theta" => FactorField::Theta,
                    "alpha" => FactorField::Alpha,
                    "beta" => FactorField::Beta,
                    "lambda" => FactorField::Lambda,
                    _ => return Err(unknown()),
                };
                let labels = if factor < 3 { rl } else { cl };
                Target::Factor { factor, regime: label_index(labels, regime, name)?, field }
            }
            ["qr", from, to] => {
                Target::RateIntensity { from: label_index(rl, from, name)?, to: label_index(rl, to, name)? }
            }
            ["qc", from, to] => {
                Target::CreditIntensity { from: label_index(cl, from, name)?, to: label_index(cl, to, name)? }
            }
            ["pass", rate, credit] => {
                Target::Passthrough { rate: label_index(rl, rate, name)?, credit: label_index(cl, credit, name)? }
            }
            ["noise", "rate", regime] => Target::RateNoise(label_index(rl, regime, name)?),
            ["noise", "credit", regime] => Target::CreditNoise(label_index(cl, regime, name)?),
            _ => return Err(unknown()),
        };
        if let Target::RateIntensity { from, to } | Target::CreditIntensity { from, to } = target {
            if from == to {
                return Err(unknown());
            }
        }
        Ok(target)
    }

    fn factor(&self, factor: usize, regime: usize) -> &FactorSpec {
        if factor < 3 {
            &self.model.rate_factors[regime][factor]
        } else {
            &self.model.credit_factors[regime]
        }
    }

    pub fn get(&self, t: Target) -> f64 {
        match t {
            Target::Factor { factor, regime, field } => {
                let f = self.factor(factor, regime);
                match field {
                    FactorField::Kappa => f.physical.kappa,
                    FactorField::Theta => f.physical.theta,
                    FactorField::Alpha => f.physical.alpha,
                    FactorField::Beta => f.physical.beta,
                    FactorField::Lambda => f.lambda.0,
                }
            }
            Target::RateIntensity { from, to } => self.model.qr.q()[(from, to)],
            Target::CreditIntensity { from, to } => self.model.qc.q()[(from, to)],
            Target::Passthrough { rate, credit } => self.model.passthrough[(rate, credit)],
            Target::RateNoise(r) => self.noise.rate_sd[r],
            Target::CreditNoise(c) => self.noise.credit_sd[c],
        }
    }

    pub fn set(&mut self, t: Target, v: f64) -> Result<(), EstimationError> {
        if !v.is_finite() {
            return Err(EstimationError::Infeasible(format!("non-finite value for {t:?}")));
        }
        match t {
            Target::Factor { factor, regime, field } => {
                let f = *self.factor(factor, regime);
                let mut p = f.physical;
                let mut lambda = f.lambda;
                match field {
                    FactorField::Kappa => p.kappa = v,
                    FactorField::Theta => p.theta = v,
                    FactorField::Alpha => p.alpha = v,
                    FactorField::Beta => p.beta = v,
                    FactorField::Lambda => lambda = RiskPrice(v),
                }
                let p = GcirParams::new(p.kappa, p.theta, p.alpha, p.beta, p.measure)
                    .map_err(|e| EstimationError::Infeasible(e.to_string()))?;
                let spec = FactorSpec::new(p, lambda).map_err(|e| EstimationError::Infeasible(e.to_string()))?;
                if factor < 3 {
                    self.model.rate_factors[regime][factor] = spec;
                } else {
                    self.model.credit_factors[regime] = spec;
                }
            }
            Target::RateIntensity { from, to } => self.model.qr = with_rate(&self.model.qr, from, to, v)?,
            Target::CreditIntensity { from, to } => self.model.qc = with_rate(&self.model.qc, from, to, v)?,
            Target::Passthrough { rate, credit } => self.model.passthrough[(rate, credit)] = v,
            Target::RateNoise(r) => self.noise.rate_sd[r] = v,
            Target::CreditNoise(c) => self.noise.credit_sd[c] = v,
        }
        Ok(())
    }

    /// Regime labelling convention: `x1`'s long-run level is nondecreasing
    /// in the rate regime index and `x4`'s in the credit regime index.
    pub fn check_ordering(&self) -> Result<(), EstimationError> {
        let ordered = |levels: Vec<f64>| levels.windows(2).all(|w| w[0] <= w[1]);
        if !ordered(self.model.rate_factors.iter().map(|f| f[0].physical.theta).collect()) {
            return Err(EstimationError::Infeasible("x1 long-run levels must increase with the rate regime".into()));
        }
        if !ordered(self.model.credit_factors.iter().map(|f| f.physical.theta).collect()) {
            return Err(EstimationError::Infeasible("x4 long-run levels must increase with the credit regime".into()));
        }
        Ok(())
    }
}

fn with_rate(g: &CtmcGenerator, from: usize, to: usize, v: f64) -> Result<CtmcGenerator, EstimationError> {
    let mut rates: DMatrix<f64> = g.q().clone();
    rates[(from, to)] = v;
    CtmcGenerator::from_rates(rates, g.labels().to_vec()).map_err(|e| EstimationError::Infeasible(e.to_string()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FreeParam {
    pub name: String,
    pub target: Target,
    pub transform: Transform,
}

/// Ordered free parameters of one estimation stage.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub stage: Stage,
    pub params: Vec<FreeParam>,
}

impl ParamVector {
    /// Resolves names against the model's regime labels with default
    /// transforms. Every name must belong to `stage`.
    pub fn from_names(state: &ModelState, stage: Stage, names: &[impl AsRef<str>]) -> Result<Self, EstimationError> {
        let mut params = Vec::with_capacity(names.len());
        for name in names {
            let name = name.as_ref();
            let target = state.parse_target(name)?;
            if target.stage() != stage {
                return Err(EstimationError::InvalidConfig(format!("{name} is not a {stage}-stage parameter")));
            }
            if params.iter().any(|p: &FreeParam| p.target == target) {
                return Err(EstimationError::InvalidConfig(format!("{name} is listed twice")));
            }
            params.push(FreeParam { name: name.to_string(), target, transform: target.default_transform() });
        }
        Ok(Self { stage, params })
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.params.iter().map(|p| p.name.clone()).collect()
    }

    pub fn natural(&self, state: &ModelState) -> Vec<f64> {
        self.params.iter().map(|p| state.get(p.target)).collect()
    }

    /// Current values on the unconstrained scale; fails if a value lies
    /// outside its transform's domain.
    pub fn transformed(&self, state: &ModelState) -> Result<Vec<f64>, EstimationError> {
        self.params
            .iter()
            .map(|p| {
                let z = p.transform.forward(state.get(p.target));
                if z.is_finite() {
                    Ok(z)
                } else {
                    Err(EstimationError::InvalidConfig(format!(
                        "{} is outside the {} domain",
                        p.name,
                        p.transform.label()
                    )))
                }
            })
            .collect()
    }

    pub fn to_natural(&self, z: &[f64]) -> Vec<f64> {
        self.params.iter().zip(z).map(|(p, z)| p.transform.inverse(*z)).collect()
    }

    /// A copy of `template` with the parameters set from `z`.
    pub fn apply(&self, template: &ModelState, z: &[f64]) -> Result<ModelState, EstimationError> {
        let mut s = template.clone();
        for (p, z) in self.params.iter().zip(z) {
            s.set(p.target, p.transform.inverse(*z))?;
        }
        s.check_ordering()?;
        Ok(s)
    }

    /// Indices of long-run level parameters, perturbed for extra starts.
    pub fn level_indices(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| matches!(self.params[i].target, Target::Factor { field: FactorField::Theta, .. }))
            .collect()
    }

    /// Natural step sizes for the optimizer: relative for identity
    /// parameters, unit on log and logit scales.
    pub fn scales(&self, z: &[f64]) -> Vec<f64> {
        self.params
            .iter()
            .zip(z)
            .map(|(p, z)| match p.transform {
                Transform::Identity if z.abs() > 0.0 => z.abs(),
                _ => 1.0,
            })
            .collect()
    }
}
