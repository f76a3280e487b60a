//! Regime-switching UKF: collapse, regime-conditional predict and update,
//! and a log-space Bayes step for the regime probabilities.

use nalgebra::DMatrix;

use crate::ukf::{gray_collapse, predict, update, GaussianBelief, Measurement, Transition, Update, UtParams};
use crate::FilterError;

const PROB_TOL: f64 = 1e-12;

/// Probability vector over regimes.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimeBeliefs(Vec<f64>);

impl RegimeBeliefs {
    pub fn new(probs: Vec<f64>) -> Result<Self, FilterError> {
        let sum: f64 = probs.iter().sum();
        if probs.is_empty() || probs.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > PROB_TOL {
            return Err(FilterError::InvalidProbabilities(probs));
        }
        Ok(Self(probs))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// One-step-ahead probabilities `pi' P`.
    pub fn propagate(&self, p: &DMatrix<f64>) -> Vec<f64> {
        (0..p.ncols()).map(|j| (0..self.0.len()).map(|i| self.0[i] * p[(i, j)]).sum()).collect()
    }
}

/// Regime probabilities with a Gaussian state belief per regime.
#[derive(Debug, Clone, PartialEq)]
pub struct RsBelief {
    pub states: Vec<GaussianBelief>,
    pub regimes: RegimeBeliefs,
}

/// Regime-conditional model pieces for one step.
pub struct RegimeModel<'a, T, M> {
    pub transition: &'a T,
    pub measurement: &'a M,
    pub noise_cov: &'a DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RsStep {
    pub posterior: RsBelief,
    pub predicted_probs: Vec<f64>,
    /// Log predictive density of the observation in each regime.
    pub regime_loglik: Vec<f64>,
    /// Log of the regime mixture of predictive densities.
    pub loglik: f64,
    pub updates: Vec<Update>,
}

/// `log sum exp` with a max shift; `-inf` when every term is `-inf`.
pub fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// Bayes update of predicted probabilities by per-regime log densities.
/// Returns the posterior probabilities and the mixture log density.
pub fn bayes_update(predicted: &[f64], regime_loglik: &[f64]) -> Result<(Vec<f64>, f64), FilterError> {
    let joint: Vec<f64> = predicted.iter().zip(regime_loglik).map(|(p, l)| p.ln() + l).collect();
    let total = log_sum_exp(&joint);
    if !total.is_finite() {
        return Err(FilterError::ZeroMixtureLikelihood);
    }
    let mut post: Vec<f64> = joint.iter().map(|j| (j - total).exp()).collect();
    let sum: f64 = post.iter().sum();
    if (sum - 1.0).abs() > PROB_TOL {
        post.iter_mut().for_each(|p| *p /= sum);
    }
    Ok((post, total))
}

/// One filtering step: collapse the previous regime-conditional beliefs,
/// predict and update under each regime, then update the regime
/// probabilities by Bayes' rule.
pub fn rs_ukf_step<T: Transition, M: Measurement>(
    prev: &RsBelief,
    y: &[Option<f64>],
    models: &[RegimeModel<'_, T, M>],
    transition: &DMatrix<f64>,
    ut: &UtParams,
) -> Result<RsStep, FilterError> {
    let n = prev.regimes.len();
    if models.len() != n || prev.states.len() != n || transition.nrows() != n || transition.ncols() != n {
        return Err(FilterError::Dimension(format!("{n} regimes but {} regime models", models.len())));
    }
    let collapsed = gray_collapse(prev.regimes.probs(), &prev.states);
    let mut updates = Vec::with_capacity(n);
    for m in models {
        let predicted = predict(&collapsed, m.transition, ut)?;
        updates.push(update(&predicted, y, m.measurement, m.noise_cov, ut)?);
    }
    let predicted_probs = prev.regimes.propagate(transition);
    let regime_loglik: Vec<f64> = updates.iter().map(|u| u.loglik).collect();
    let (probs, loglik) = bayes_update(&predicted_probs, &regime_loglik)?;
    let states = updates.iter().map(|u| u.posterior.clone()).collect();
    Ok(RsStep {
        posterior: RsBelief { states, regimes: RegimeBeliefs(probs) },
        predicted_probs,
        regime_loglik,
        loglik,
        updates,
    })
}
