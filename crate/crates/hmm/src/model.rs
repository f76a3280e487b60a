use nalgebra::{DMatrix, DVector};

use crate::HmmError;

const PROB_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CovarianceKind {
    #[default]
    Full,
    Diagonal,
}

/// Hidden Markov model with multivariate Gaussian emissions.
#[derive(Debug, Clone, PartialEq)]
pub struct HmmModel {
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
    /// Row-stochastic one-step transition matrix.
    pub trans: DMatrix<f64>,
    pub init: DVector<f64>,
}

impl HmmModel {
    pub fn new(
        means: Vec<DVector<f64>>,
        covs: Vec<DMatrix<f64>>,
        trans: DMatrix<f64>,
        init: DVector<f64>,
    ) -> Result<Self, HmmError> {
        let k = means.len();
        if k == 0 || covs.len() != k || trans.shape() != (k, k) || init.len() != k {
            return Err(HmmError::Dimension(format!("{k} means, {} covariances", covs.len())));
        }
        let m = means[0].len();
        if means.iter().any(|v| v.len() != m) || covs.iter().any(|c| c.shape() != (m, m)) {
            return Err(HmmError::Dimension("emission dimensions differ across states".into()));
        }
        for (i, c) in covs.iter().enumerate() {
            if c.clone().symmetric_eigen().eigenvalues.min() < -PROB_TOL * c.norm().max(1.0) {
                return Err(HmmError::InvalidModel(format!("covariance of state {i} is not positive semidefinite")));
            }
        }
        let stochastic = |v: &mut dyn Iterator<Item = f64>| {
            let vals: Vec<f64> = v.collect();
            vals.iter().all(|p| *p >= 0.0) && (vals.iter().sum::<f64>() - 1.0).abs() < PROB_TOL
        };
        if !(0..k).all(|i| stochastic(&mut trans.row(i).iter().copied())) {
            return Err(HmmError::InvalidModel("transition matrix is not row-stochastic".into()));
        }
        if !stochastic(&mut init.iter().copied()) {
            return Err(HmmError::InvalidModel("initial distribution does not sum to one".into()));
        }
        Ok(Self { means, covs, trans, init })
    }

    pub fn k(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    /// Average of a state's mean vector across series.
    pub fn level(&self, state: usize) -> f64 {
        self.means[state].mean()
    }

    /// State indices sorted by ascending level, ties by index.
    pub fn level_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.k()).collect();
        order.sort_by(|&a, &b| self.level(a).total_cmp(&self.level(b)).then(a.cmp(&b)));
        order
    }

    /// The same model with states listed in `order`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let k = self.k();
        Self {
            means: order.iter().map(|&i| self.means[i].clone()).collect(),
            covs: order.iter().map(|&i| self.covs[i].clone()).collect(),
            trans: DMatrix::from_fn(k, k, |i, j| self.trans[(order[i], order[j])]),
            init: DVector::from_fn(k, |i, _| self.init[order[i]]),
        }
    }

    /// States relabelled so that state 0 has the lowest level and the last
    /// state the highest.
    pub fn ordered_by_level(&self) -> Self {
        self.permuted(&self.level_order())
    }
}
