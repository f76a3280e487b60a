//! Model selection, regime durations, and classification.

use nalgebra::{DMatrix, DVector};

use crate::fit::forward_backward;
use crate::model::{CovarianceKind, HmmModel};
use crate::HmmError;

/// Free parameters: means, covariances, off-diagonal transitions, and the
/// initial distribution.
pub fn parameter_count(k: usize, m: usize, kind: CovarianceKind) -> usize {
    let cov = match kind {
        CovarianceKind::Full => m * (m + 1) / 2,
        CovarianceKind::Diagonal => m,
    };
    k * m + k * cov + k * (k - 1) + (k - 1)
}

/// `(AIC, BIC)`; lower is better.
pub fn information_criteria(loglik: f64, k: usize, m: usize, t: usize, kind: CovarianceKind) -> (f64, f64) {
    let p = parameter_count(k, m, kind) as f64;
    (-2.0 * loglik + 2.0 * p, -2.0 * loglik + p * (t as f64).ln())
}

/// Expected regime durations `delta / (1 - p_ii)`, in the units of `delta`.
pub fn regime_durations(trans: &DMatrix<f64>, delta: f64) -> Result<Vec<f64>, HmmError> {
    (0..trans.nrows())
        .map(|i| {
            let stay = trans[(i, i)];
            if stay >= 1.0 {
                Err(HmmError::AbsorbingState(i))
            } else {
                Ok(delta / (1.0 - stay))
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    /// The model with states in ascending level order; labels refer to it.
    pub model: HmmModel,
    pub labels: Vec<usize>,
    /// `[t][k]` smoothed probabilities.
    pub probs: Vec<DVector<f64>>,
    pub loglik: f64,
}

/// Most probable state per date from smoothed probabilities, after ordering
/// states by level so that the last state is the high-level one.
pub fn classify(model: &HmmModel, y: &[DVector<f64>]) -> Result<Classification, HmmError> {
    let model = model.ordered_by_level();
    let s = forward_backward(&model, y)?;
    let labels = s.gamma.iter().map(|g| g.argmax().0).collect();
    Ok(Classification { model, labels, probs: s.gamma, loglik: s.loglik })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegimeMoments {
    pub state: usize,
    /// Dates classified into the state.
    pub count: usize,
    pub weight: f64,
    /// Average of the emission mean across series.
    pub mean_level: f64,
    /// Trace of the emission covariance.
    pub dispersion: f64,
}

pub fn regime_moments(c: &Classification) -> Vec<RegimeMoments> {
    let n = c.labels.len().max(1) as f64;
    (0..c.model.k())
        .map(|j| {
            let count = c.labels.iter().filter(|&&l| l == j).count();
            RegimeMoments {
                state: j,
                count,
                weight: count as f64 / n,
                mean_level: c.model.level(j),
                dispersion: c.model.covs[j].trace(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_series_two_parameters() {
        assert_eq!(parameter_count(1, 1, CovarianceKind::Full), 2);
        let (aic, bic) = information_criteria(-10.0, 1, 1, 100, CovarianceKind::Full);
        assert_eq!(aic, 24.0);
        assert!((bic - (20.0 + 2.0 * 100f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn durations_by_hand() {
        let p = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.0, 1.0]);
        assert_eq!(regime_durations(&p, 1.0), Err(HmmError::AbsorbingState(1)));
        let p = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 1.0, 0.0]);
        assert_eq!(regime_durations(&p, 1.0).unwrap(), vec![2.0, 1.0]);
    }
}
