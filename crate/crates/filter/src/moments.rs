//! Exact one-step conditional moments of independent GCIR factors.

use nalgebra::{DMatrix, DVector};
use rsgcir_core::affine::{decay_integral, GcirParams};

use crate::ukf::Transition;

/// Conditional mean and variance of one factor after `delta`, starting at `x`
/// with the regime frozen. The variance is floored at zero for states below
/// the factor's lower boundary.
pub fn factor_moments(p: &GcirParams, x: f64, delta: f64) -> (f64, f64) {
    let decay = (-p.kappa * delta).exp();
    let mean = p.theta + (x - p.theta) * decay;
    let var = (p.alpha + p.beta * p.theta) * decay_integral(2.0 * p.kappa, delta)
        + p.beta * (x - p.theta) * decay * decay_integral(p.kappa, delta);
    (mean, var.max(0.0))
}

/// Conditional mean vector and covariance of a factor block. Off-diagonal
/// covariances are `rho_ij * sd_i * sd_j` for an optional correlation matrix.
pub fn state_moments(
    params: &[GcirParams],
    x: &DVector<f64>,
    delta: f64,
    correlation: Option<&DMatrix<f64>>,
) -> (DVector<f64>, DMatrix<f64>) {
    let n = params.len();
    let mut mean = DVector::zeros(n);
    let mut var = vec![0.0; n];
    for k in 0..n {
        (mean[k], var[k]) = factor_moments(&params[k], x[k], delta);
    }
    let mut cov = DMatrix::from_diagonal(&DVector::from_vec(var.clone()));
    if let Some(rho) = correlation {
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    cov[(i, j)] = rho[(i, j)] * (var[i] * var[j]).sqrt();
                }
            }
        }
    }
    (mean, cov)
}

/// One-step GCIR transition of a factor block in a fixed regime.
#[derive(Debug, Clone, PartialEq)]
pub struct GcirTransition {
    pub params: Vec<GcirParams>,
    pub delta: f64,
    pub correlation: Option<DMatrix<f64>>,
}

impl GcirTransition {
    pub fn new(params: Vec<GcirParams>, delta: f64) -> Self {
        Self { params, delta, correlation: None }
    }
}

impl Transition for GcirTransition {
    fn mean(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.params.len(),
            self.params.iter().enumerate().map(|(k, p)| factor_moments(p, x[k], self.delta).0),
        )
    }

    fn cov(&self, x: &DVector<f64>) -> DMatrix<f64> {
        state_moments(&self.params, x, self.delta, self.correlation.as_ref()).1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rsgcir_core::affine::Measure;

    fn cir(kappa: f64, theta: f64, beta: f64) -> GcirParams {
        GcirParams::new(kappa, theta, 0.0, beta, Measure::Physical).unwrap()
    }

    #[test]
    fn zero_step_is_a_point_mass() {
        let p = GcirParams::new(0.7, 0.03, 1e-4, 0.02, Measure::Physical).unwrap();
        assert_eq!(factor_moments(&p, 0.05, 0.0), (0.05, 0.0));
    }

    #[test]
    fn fast_reversion_forgets_the_start() {
        let p = cir(50.0, 0.03, 0.02);
        let (m, _) = factor_moments(&p, 0.5, 1.0);
        assert!((m - 0.03).abs() < 1e-12);
    }

    #[test]
    fn cir_variance_matches_the_classical_formula() {
        for &(kappa, theta, beta, x, d) in &[(0.5, 0.04, 0.01, 0.02, 1.0 / 52.0), (2.0, 0.01, 0.05, 0.03, 0.5)] {
            let (_, v) = factor_moments(&cir(kappa, theta, beta), x, d);
            let e1 = (-kappa * d).exp();
            let classical = x * (beta / kappa) * (e1 - e1 * e1) + theta * beta / (2.0 * kappa) * (1.0 - e1).powi(2);
            assert!((v - classical).abs() < 1e-15 * classical.max(1.0), "{v} vs {classical}");
        }
    }

    #[test]
    fn correlation_scales_off_diagonals() {
        let ps = [cir(0.5, 0.04, 0.01), cir(1.0, 0.02, 0.04)];
        let x = DVector::from_vec(vec![0.04, 0.02]);
        let rho = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let (_, c) = state_moments(&ps, &x, 0.1, Some(&rho));
        assert!((c[(0, 1)] - 0.5 * (c[(0, 0)] * c[(1, 1)]).sqrt()).abs() < 1e-18);
    }
}
