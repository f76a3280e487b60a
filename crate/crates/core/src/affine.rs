//! Generalized CIR factor dynamics and their exponential-affine transform.
//!
//! A factor follows `dX = kappa (theta - X) dt + sqrt(alpha + beta X) dW`.
//! The transform `E[exp(-c1 * int_t^T X du) * exp(-c2 * X_T) | X_t = x]`
//! equals `exp(A - B x)` with `(A, B)` solving a scalar Riccati system in
//! time-to-maturity, started from `A = 0`, `B = c2`.

use thiserror::Error;

/// Below this `beta` the Gaussian (Vasicek-type) limit is used.
pub const BETA_GAUSSIAN_LIMIT: f64 = 1e-10;

/// Below this `beta` the diffusion part of `A` is integrated numerically,
/// because its closed form loses about `alpha * tau * eps / beta`.
pub const BETA_QUADRATURE_LIMIT: f64 = 1e-6;

/// Relative agreement required between the two market-price inversions.
pub const LAMBDA_AGREEMENT_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AffineError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("inadmissible transform: kappa^2 + 2 beta c1 = {0} is not positive")]
    InadmissibleTransform(f64),
    #[error("transform denominator is not positive ({0}); the expectation is infinite")]
    SingularDenominator(f64),
    #[error("risk-neutral mean reversion kappa + beta lambda = {0} is not positive")]
    InadmissibleMeasureChange(f64),
    #[error("cannot recover lambda: alpha and beta are both zero")]
    DegenerateInversion,
    #[error("inconsistent measure pair: {0}")]
    InconsistentPair(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Measure {
    Physical,
    RiskNeutral,
}

/// Parameters of one generalized CIR factor under a stated measure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GcirParams {
    pub kappa: f64,
    pub theta: f64,
    pub alpha: f64,
    pub beta: f64,
    pub measure: Measure,
}

impl GcirParams {
    /// Validated constructor: `alpha, beta >= 0`, `alpha + beta > 0`, and
    /// `kappa > 0` under the risk-neutral measure.
    pub fn new(kappa: f64, theta: f64, alpha: f64, beta: f64, measure: Measure) -> Result<Self, AffineError> {
        let p = Self::zero_diffusion(kappa, theta, measure)?;
        if !(alpha.is_finite() && beta.is_finite()) || alpha < 0.0 || beta < 0.0 {
            return Err(AffineError::InvalidParams(format!(
                "alpha = {alpha}, beta = {beta} must be finite and nonnegative"
            )));
        }
        if alpha + beta <= 0.0 {
            return Err(AffineError::InvalidParams("alpha + beta must be positive".into()));
        }
        Ok(Self { alpha, beta, ..p })
    }

    /// Deterministic mean-reverting factor (`alpha = beta = 0`).
    pub fn zero_diffusion(kappa: f64, theta: f64, measure: Measure) -> Result<Self, AffineError> {
        if !(kappa.is_finite() && theta.is_finite()) {
            return Err(AffineError::InvalidParams(format!("kappa = {kappa}, theta = {theta} must be finite")));
        }
        if measure == Measure::RiskNeutral && kappa <= 0.0 {
            return Err(AffineError::InvalidParams(format!("risk-neutral kappa must be positive, got {kappa}")));
        }
        Ok(Self { kappa, theta, alpha: 0.0, beta: 0.0, measure })
    }

    /// Lower edge of the state space, `-alpha / beta` (or `-inf` when `beta = 0`).
    pub fn lower_boundary(&self) -> f64 {
        if self.beta > 0.0 {
            -self.alpha / self.beta
        } else {
            f64::NEG_INFINITY
        }
    }

    /// Long-run variance `(alpha + beta theta) / (2 kappa)`; requires `kappa > 0`.
    pub fn stationary_variance(&self) -> f64 {
        ((self.alpha + self.beta * self.theta) / (2.0 * self.kappa)).max(0.0)
    }
}

/// Market price of diffusion risk for one factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskPrice(pub f64);

/// Maps physical parameters to risk-neutral ones:
/// `kappa' = kappa + beta lambda`, `theta' = (kappa theta - alpha lambda) / kappa'`.
pub fn to_risk_neutral(p: &GcirParams, lambda: RiskPrice) -> Result<GcirParams, AffineError> {
    let lambda = lambda.0;
    if !lambda.is_finite() {
        return Err(AffineError::InvalidParams(format!("lambda = {lambda}")));
    }
    let kappa_q = p.kappa + p.beta * lambda;
    if !(kappa_q > 0.0) {
        return Err(AffineError::InadmissibleMeasureChange(kappa_q));
    }
    if lambda == 0.0 {
        return Ok(GcirParams { measure: Measure::RiskNeutral, ..*p });
    }
    let theta_q = (p.kappa * p.theta - p.alpha * lambda) / kappa_q;
    Ok(GcirParams { kappa: kappa_q, theta: theta_q, alpha: p.alpha, beta: p.beta, measure: Measure::RiskNeutral })
}

/// Recovers `lambda` from a physical/risk-neutral pair sharing `(alpha, beta)`.
///
/// When both `alpha` and `beta` are nonzero the two available inversions are
/// computed and must agree to [`LAMBDA_AGREEMENT_TOL`] relative.
pub fn implied_lambda(p: &GcirParams, q: &GcirParams) -> Result<RiskPrice, AffineError> {
    if p.alpha != q.alpha || p.beta != q.beta {
        return Err(AffineError::InconsistentPair("alpha and beta must coincide across measures".into()));
    }
    let from_kappa = (p.beta != 0.0).then(|| (q.kappa - p.kappa) / p.beta);
    let from_level = (p.alpha != 0.0).then(|| (p.kappa * p.theta - q.kappa * q.theta) / p.alpha);
    match (from_kappa, from_level) {
        (None, None) => Err(AffineError::DegenerateInversion),
        (Some(l), None) | (None, Some(l)) => Ok(RiskPrice(l)),
        (Some(l1), Some(l2)) => {
            let scale = l1.abs().max(l2.abs()).max(1.0);
            if (l1 - l2).abs() > LAMBDA_AGREEMENT_TOL * scale {
                Err(AffineError::InconsistentPair(format!(
                    "lambda from kappa {l1} differs from lambda from level {l2}"
                )))
            } else {
                Ok(RiskPrice(l1))
            }
        }
    }
}

/// Coefficients of `exp(A - B x)` for a given loading pair and horizon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineCoeffs {
    pub a: f64,
    pub b: f64,
    pub tau: f64,
    pub c1: f64,
    pub c2: f64,
}

impl AffineCoeffs {
    pub fn value(&self, x: f64) -> f64 {
        transform_value(self, x)
    }
}

pub fn transform_value(coeffs: &AffineCoeffs, x: f64) -> f64 {
    (coeffs.a - coeffs.b * x).exp()
}

/// Closed-form transform coefficients.
///
/// The log term is evaluated through `ln_1p`/`exp_m1` so that it stays
/// accurate as `beta` shrinks; below [`BETA_GAUSSIAN_LIMIT`] the exact
/// Gaussian-limit expressions are used instead.
pub fn affine_coefficients(p: &GcirParams, c1: f64, c2: f64, tau: f64) -> Result<AffineCoeffs, AffineError> {
    if !(tau >= 0.0 && tau.is_finite() && c1.is_finite() && c2.is_finite()) {
        return Err(AffineError::InvalidParams(format!("tau = {tau}, c1 = {c1}, c2 = {c2}")));
    }
    let out = |a: f64, b: f64| AffineCoeffs { a, b, tau, c1, c2 };
    if tau == 0.0 {
        return Ok(out(0.0, c2));
    }
    if p.beta < BETA_GAUSSIAN_LIMIT {
        let (a, b) = gaussian_limit(p, c1, c2, tau);
        return Ok(out(a, b));
    }
    let (k, th, al, be) = (p.kappa, p.theta, p.alpha, p.beta);
    let disc = k * k + 2.0 * be * c1;
    if !(disc > 0.0) {
        return Err(AffineError::InadmissibleTransform(disc));
    }
    let g = disc.sqrt();
    let s = g + k;
    if !(s > 0.0) {
        return Err(AffineError::InadmissibleTransform(disc));
    }
    // Numerator and denominator are scaled by exp(-g tau) to avoid overflow.
    let decay = (-g * tau).exp();
    let grow = -(-g * tau).exp_m1();
    let den = 2.0 * g * decay + (s + be * c2) * grow;
    if !(den > 0.0) || !den.is_finite() {
        return Err(AffineError::SingularDenominator(den));
    }
    let b = (2.0 * c1 * grow + (g - k) * c2 + s * c2 * decay) / den;

    // den / (2g) - 1 = grow * beta * (c2 - 2 c1 / s) / (2g), and
    // (k - g) tau / 2 = -beta c1 tau / s; both are O(beta).
    let x = grow * (c2 - 2.0 * c1 / s) / (2.0 * g);
    let log_over_beta = -(be * x).ln_1p() / be - c1 * tau / s;
    let diffusion = if al == 0.0 {
        0.0
    } else if be < BETA_QUADRATURE_LIMIT {
        0.5 * al * squared_slope_integral(g, k, be, c1, c2, tau)
    } else {
        (al / be) * (c1 * tau - (b - c2) + 2.0 * k * log_over_beta)
    };
    Ok(out(diffusion + 2.0 * th * k * log_over_beta, b))
}

fn slope(g: f64, k: f64, be: f64, c1: f64, c2: f64, u: f64) -> f64 {
    let decay = (-g * u).exp();
    let grow = -(-g * u).exp_m1();
    let s = g + k;
    (2.0 * c1 * grow + (g - k) * c2 + s * c2 * decay) / (2.0 * g * decay + (s + be * c2) * grow)
}

/// `int_0^tau B(u)^2 du` by composite Gauss-Legendre.
fn squared_slope_integral(g: f64, k: f64, be: f64, c1: f64, c2: f64, tau: f64) -> f64 {
    let panels = ((g * tau).ceil() as usize).clamp(1, 256);
    crate::linalg::integrate(|u| slope(g, k, be, c1, c2, u).powi(2), tau, panels, 16)
}

/// `(1 - exp(-k t)) / k`, continuous at `k = 0`.
pub fn decay_integral(k: f64, t: f64) -> f64 {
    if (k * t).abs() < 1e-12 {
        t
    } else {
        -(-k * t).exp_m1() / k
    }
}

fn gaussian_limit(p: &GcirParams, c1: f64, c2: f64, tau: f64) -> (f64, f64) {
    let (k, th, al) = (p.kappa, p.theta, p.alpha);
    if (k * tau).abs() < 1e-8 {
        let b = c2 + c1 * tau;
        let i1 = c2 * tau + 0.5 * c1 * tau * tau;
        let i2 = c2 * c2 * tau + c1 * c2 * tau * tau + c1 * c1 * tau.powi(3) / 3.0;
        return (-k * th * i1 + 0.5 * al * i2, b);
    }
    let level = c1 / k;
    let gap = c2 - level;
    let e1 = decay_integral(k, tau);
    let e2 = decay_integral(2.0 * k, tau);
    let b = level + gap * (-k * tau).exp();
    let i1 = level * tau + gap * e1;
    let i2 = level * level * tau + 2.0 * level * gap * e1 + gap * gap * e2;
    (-k * th * i1 + 0.5 * al * i2, b)
}

/// Fourth-order Runge-Kutta integration of the Riccati system in
/// time-to-maturity: `B' = c1 - kappa B - beta B^2 / 2`,
/// `A' = -kappa theta B + alpha B^2 / 2`, with `A(0) = 0`, `B(0) = c2`.
///
/// Independent of the closed form; used as its reference solution.
pub fn riccati_oracle(p: &GcirParams, c1: f64, c2: f64, tau: f64, steps: usize) -> AffineCoeffs {
    let steps = steps.max(1);
    let h = tau / steps as f64;
    let (k, th, al, be) = (p.kappa, p.theta, p.alpha, p.beta);
    let rhs = |b: f64| (-k * th * b + 0.5 * al * b * b, c1 - k * b - 0.5 * be * b * b);
    let (mut a, mut b) = (0.0_f64, c2);
    for _ in 0..steps {
        let (ka1, kb1) = rhs(b);
        let (ka2, kb2) = rhs(b + 0.5 * h * kb1);
        let (ka3, kb3) = rhs(b + 0.5 * h * kb2);
        let (ka4, kb4) = rhs(b + h * kb3);
        a += h / 6.0 * (ka1 + 2.0 * ka2 + 2.0 * ka3 + ka4);
        b += h / 6.0 * (kb1 + 2.0 * kb2 + 2.0 * kb3 + kb4);
    }
    AffineCoeffs { a, b, tau, c1, c2 }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(kappa: f64, theta: f64, alpha: f64, beta: f64) -> GcirParams {
        GcirParams::new(kappa, theta, alpha, beta, Measure::RiskNeutral).unwrap()
    }

    #[test]
    fn zero_horizon_is_identity() {
        let c = affine_coefficients(&q(0.5, 0.04, 0.001, 0.02), 1.0, 0.3, 0.0).unwrap();
        assert_eq!((c.a, c.b), (0.0, 0.3));
    }

    #[test]
    fn null_loadings_give_unit_transform() {
        let c = affine_coefficients(&q(0.5, 0.04, 0.001, 0.02), 0.0, 0.0, 7.0).unwrap();
        assert!(c.a.abs() < 1e-15 && c.b.abs() < 1e-15);
    }

    #[test]
    fn rejects_invalid_parameters() {
        assert!(GcirParams::new(0.5, 0.04, -1e-3, 0.02, Measure::Physical).is_err());
        assert!(GcirParams::new(0.5, 0.04, 0.0, 0.0, Measure::Physical).is_err());
        assert!(GcirParams::new(-0.5, 0.04, 0.0, 0.02, Measure::RiskNeutral).is_err());
        assert!(GcirParams::new(-0.5, 0.04, 0.0, 0.02, Measure::Physical).is_ok());
    }

    #[test]
    fn explosive_transform_is_reported() {
        let p = q(0.1, 0.04, 0.0, 0.5);
        let err = affine_coefficients(&p, 0.0, -5.0, 30.0).unwrap_err();
        assert!(matches!(err, AffineError::SingularDenominator(_)));
        let err = affine_coefficients(&p, -1.0, 0.0, 1.0).unwrap_err();
        assert!(matches!(err, AffineError::InadmissibleTransform(_)));
    }

    #[test]
    fn measure_map_preserves_level_product() {
        let p = GcirParams::new(1.489, 0.00625, 0.000133, 0.000126, Measure::Physical).unwrap();
        let qq = to_risk_neutral(&p, RiskPrice(-41.098)).unwrap();
        let lhs = (qq.beta * qq.theta + qq.alpha) * qq.kappa;
        let rhs = (p.beta * p.theta + p.alpha) * p.kappa;
        assert!((lhs - rhs).abs() <= 1e-14 * rhs.abs());
        assert!((qq.kappa - (1.489 - 0.000126 * 41.098)).abs() < 1e-15);
    }

    #[test]
    fn measure_map_rejects_nonpositive_kappa() {
        let p = GcirParams::new(0.1, 0.02, 0.0, 0.1, Measure::Physical).unwrap();
        assert!(matches!(to_risk_neutral(&p, RiskPrice(-2.0)), Err(AffineError::InadmissibleMeasureChange(_))));
    }

    #[test]
    fn lambda_inversion_variants() {
        let p = GcirParams::new(0.8, 0.03, 0.002, 0.05, Measure::Physical).unwrap();
        let qq = to_risk_neutral(&p, RiskPrice(0.7)).unwrap();
        assert!((implied_lambda(&p, &qq).unwrap().0 - 0.7).abs() < 1e-12);

        let p_cir = GcirParams::new(0.8, 0.03, 0.0, 0.05, Measure::Physical).unwrap();
        let q_cir = to_risk_neutral(&p_cir, RiskPrice(-0.4)).unwrap();
        assert!((implied_lambda(&p_cir, &q_cir).unwrap().0 + 0.4).abs() < 1e-12);

        let p_gauss = GcirParams::new(0.8, 0.03, 0.002, 0.0, Measure::Physical).unwrap();
        let q_gauss = to_risk_neutral(&p_gauss, RiskPrice(1.5)).unwrap();
        assert!((implied_lambda(&p_gauss, &q_gauss).unwrap().0 - 1.5).abs() < 1e-10);

        let mut bad = qq;
        bad.theta *= 1.01;
        assert!(matches!(implied_lambda(&p, &bad), Err(AffineError::InconsistentPair(_))));
        let d = GcirParams::zero_diffusion(0.8, 0.03, Measure::Physical).unwrap();
        assert_eq!(implied_lambda(&d, &d), Err(AffineError::DegenerateInversion));
    }

    #[test]
    fn closed_form_matches_runge_kutta_on_a_spot_set() {
        let p = q(0.7, 0.035, 0.0004, 0.03);
        for &(c1, c2, tau) in &[(1.0, 0.0, 5.0), (0.4, -0.8, 12.0), (-0.2, 0.3, 0.5)] {
            let cf = affine_coefficients(&p, c1, c2, tau).unwrap();
            let ode = riccati_oracle(&p, c1, c2, tau, 20_000);
            assert!((cf.a - ode.a).abs() < 1e-9, "A {} vs {}", cf.a, ode.a);
            assert!((cf.b - ode.b).abs() < 1e-9, "B {} vs {}", cf.b, ode.b);
        }
    }

    #[test]
    fn gaussian_branch_is_continuous_with_closed_form() {
        for &beta in &[1e-13, 1e-11] {
            let tiny = q(0.9, 0.02, 0.0003, beta);
            let lim = affine_coefficients(&tiny, 1.0, 0.2, 10.0).unwrap();
            let ode = riccati_oracle(&tiny, 1.0, 0.2, 10.0, 20_000);
            assert!((lim.a - ode.a).abs() < 1e-8 && (lim.b - ode.b).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_diffusion_is_deterministic_discounting() {
        let p = GcirParams::zero_diffusion(0.5, 0.03, Measure::RiskNeutral).unwrap();
        let c = affine_coefficients(&p, 1.0, 0.0, 4.0).unwrap();
        // With x = theta the factor is constant, so the transform is exp(-theta tau).
        assert!((c.value(0.03) - (-0.12f64).exp()).abs() < 1e-15);
    }
}
