//! Continuous-time Markov chains for the rate regime, the credit regime,
//! and their independent joint chain.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg::{expm, LinalgError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegimeError {
    #[error("invalid generator: {0}")]
    InvalidGenerator(String),
    #[error("chain is reducible: state {0} cannot reach every other state")]
    ReducibleChain(usize),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Intensity matrix of a finite-state chain, in units of 1/years.
#[derive(Debug, Clone, PartialEq)]
pub struct CtmcGenerator {
    q: DMatrix<f64>,
    labels: Vec<String>,
}

impl CtmcGenerator {
    /// Validates nonnegative off-diagonals and zero row sums.
    pub fn new(q: DMatrix<f64>, labels: Vec<String>) -> Result<Self, RegimeError> {
        let n = q.nrows();
        if n == 0 || q.ncols() != n {
            return Err(RegimeError::InvalidGenerator(format!(
                "expected a nonempty square matrix, got {}x{}",
                q.nrows(),
                q.ncols()
            )));
        }
        if labels.len() != n {
            return Err(RegimeError::InvalidGenerator(format!("{} labels for {} states", labels.len(), n)));
        }
        let scale = q.amax().max(1.0);
        for i in 0..n {
            for j in 0..n {
                let v = q[(i, j)];
                if !v.is_finite() || (i != j && v < 0.0) {
                    return Err(RegimeError::InvalidGenerator(format!("entry ({i},{j}) = {v}")));
                }
            }
            let row_sum: f64 = q.row(i).sum();
            if row_sum.abs() > 1e-10 * scale {
                return Err(RegimeError::InvalidGenerator(format!("row {i} sums to {row_sum}")));
            }
        }
        Ok(Self { q, labels })
    }

    /// Builds a generator from off-diagonal intensities, filling the diagonal.
    pub fn from_rates(rates: DMatrix<f64>, labels: Vec<String>) -> Result<Self, RegimeError> {
        let mut q = rates;
        for i in 0..q.nrows().min(q.ncols()) {
            q[(i, i)] = 0.0;
            let s: f64 = q.row(i).sum();
            q[(i, i)] = -s;
        }
        Self::new(q, labels)
    }

    /// Two-state generator `[[-a, a], [b, -b]]`.
    pub fn two_state(a: f64, b: f64, labels: [&str; 2]) -> Result<Self, RegimeError> {
        Self::new(DMatrix::from_row_slice(2, 2, &[-a, a, b, -b]), labels.iter().map(|s| s.to_string()).collect())
    }

    /// Single absorbing state; the chain never moves.
    pub fn single(label: &str) -> Self {
        Self { q: DMatrix::zeros(1, 1), labels: vec![label.to_string()] }
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.q.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.q.nrows() == 0
    }
}

/// Transition probabilities over a fixed horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    pub p: DMatrix<f64>,
    pub horizon: f64,
}

/// `exp(Q delta)`, renormalized only if rows drift by more than `1e-12`.
pub fn transition_matrix(g: &CtmcGenerator, delta: f64) -> Result<TransitionMatrix, RegimeError> {
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(RegimeError::InvalidGenerator(format!("horizon {delta}")));
    }
    let mut p = expm(&(g.q() * delta))?;
    p.iter_mut().for_each(|v| *v = v.max(0.0));
    for i in 0..p.nrows() {
        let s: f64 = p.row(i).sum();
        if (s - 1.0).abs() > 1e-12 {
            log::warn!("transition row {i} sums to {s}; renormalizing");
            p.row_mut(i).iter_mut().for_each(|v| *v /= s);
        }
    }
    Ok(TransitionMatrix { p, horizon: delta })
}

/// Generator of two independent chains on the product space, ordered with
/// the first chain's state varying slowest.
pub fn kronecker_sum(qr: &CtmcGenerator, qc: &CtmcGenerator) -> CtmcGenerator {
    let (nr, nc) = (qr.len(), qc.len());
    let q = qr.q().kronecker(&DMatrix::identity(nc, nc)) + DMatrix::identity(nr, nr).kronecker(qc.q());
    let labels = qr.labels().iter().flat_map(|r| qc.labels().iter().map(move |c| format!("{r}/{c}"))).collect();
    CtmcGenerator { q, labels }
}

/// Index of the joint state `(rate, credit)` in the product ordering.
pub fn joint_index(rate: usize, credit: usize, n_credit: usize) -> usize {
    rate * n_credit + credit
}

fn reachable(q: &DMatrix<f64>, start: usize, forward: bool) -> Vec<bool> {
    let n = q.nrows();
    let mut seen = vec![false; n];
    let mut stack = vec![start];
    seen[start] = true;
    while let Some(i) = stack.pop() {
        for j in 0..n {
            let w = if forward { q[(i, j)] } else { q[(j, i)] };
            if i != j && w > 0.0 && !seen[j] {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    seen
}

/// Unique invariant distribution of an irreducible chain.
pub fn stationary_distribution(g: &CtmcGenerator) -> Result<DVector<f64>, RegimeError> {
    let n = g.len();
    for forward in [true, false] {
        if let Some(miss) = reachable(g.q(), 0, forward).iter().position(|s| !s) {
            return Err(RegimeError::ReducibleChain(miss));
        }
    }
    let mut a = g.q().transpose();
    a.row_mut(n - 1).fill(1.0);
    let mut rhs = DVector::zeros(n);
    rhs[n - 1] = 1.0;
    let mut pi = a.lu().solve(&rhs).ok_or(LinalgError::Singular)?;
    pi.iter_mut().for_each(|v| *v = v.max(0.0));
    let total = pi.sum();
    Ok(pi / total)
}
