use proptest::prelude::*;
use rand::Rng;
use rsgcir_core::affine::*;
use rsgcir_core::simulate::{mc_transform_oracle, stream_rng};

fn q(kappa: f64, theta: f64, alpha: f64, beta: f64) -> GcirParams {
    GcirParams::new(kappa, theta, alpha, beta, Measure::RiskNeutral).unwrap()
}

/// Classical CIR bond coefficients with volatility `sigma^2 = beta`.
fn classical_cir(kappa: f64, theta: f64, beta: f64, tau: f64) -> (f64, f64) {
    let g = (kappa * kappa + 2.0 * beta).sqrt();
    let e = (g * tau).exp_m1();
    let den = (g + kappa) * e + 2.0 * g;
    let b = 2.0 * e / den;
    // log(2g exp((kappa + g) tau / 2) / den) without cancellation near tau = 0
    let log_term = (kappa + g) * tau / 2.0 - ((g + kappa) * e / (2.0 * g)).ln_1p();
    (2.0 * kappa * theta / beta * log_term, b)
}

#[test]
fn closed_form_matches_ode_oracle_on_random_sets() {
    let mut rng = stream_rng(2024, 0);
    let mut checked = 0;
    while checked < 100 {
        let kappa = rng.random_range(0.05..3.0);
        // Every tenth set exercises the Gaussian limit, every seventh pure CIR.
        let beta = if checked % 10 == 9 { 0.0 } else { rng.random_range(1e-6..0.1) };
        let alpha = if checked % 7 == 6 && beta > 0.0 { 0.0 } else { rng.random_range(1e-6..0.01) };
        let p = q(kappa, rng.random_range(-0.01..0.1), alpha, beta);
        let (c1, c2, tau) = (rng.random_range(-0.3..2.0), rng.random_range(-0.5..2.0), rng.random_range(0.01..30.0));
        let Ok(closed) = affine_coefficients(&p, c1, c2, tau) else { continue };
        let ode = riccati_oracle(&p, c1, c2, tau, 10_000);
        assert!((closed.a - ode.a).abs() < 1e-8, "{p:?} c1={c1} c2={c2} tau={tau}: A {} vs {}", closed.a, ode.a);
        assert!((closed.b - ode.b).abs() < 1e-8, "{p:?} c1={c1} c2={c2} tau={tau}: B {} vs {}", closed.b, ode.b);
        checked += 1;
    }
}

#[test]
fn pure_cir_reduces_to_classical_formulas() {
    for &(kappa, theta, beta) in &[(0.5, 0.05, 0.02), (1.2, 0.03, 0.005), (0.1, 0.08, 0.04)] {
        for &tau in &[0.1, 1.0, 5.0, 30.0] {
            let c = affine_coefficients(&q(kappa, theta, 0.0, beta), 1.0, 0.0, tau).unwrap();
            let (a, b) = classical_cir(kappa, theta, beta, tau);
            assert!((c.a - a).abs() <= 1e-12 * a.abs(), "A {} vs {a}", c.a);
            assert!((c.b - b).abs() <= 1e-12 * b.abs(), "B {} vs {b}", c.b);
        }
    }
}

#[test]
fn discount_transform_matches_monte_carlo() {
    let p = q(0.5, 0.05, 0.0, 0.02);
    let price = affine_coefficients(&p, 1.0, 0.0, 1.0).unwrap().value(0.03);
    let mc = mc_transform_oracle(&p, 0.03, 1.0, 0.0, 1.0, 50_000, 1.0 / 832.0, 11);
    assert!(mc.z_score(price) < 3.0, "{price} vs {mc:?}");

    let g = q(0.8, 0.02, 0.004, 0.05);
    let v = affine_coefficients(&g, 0.7, 0.4, 2.0).unwrap().value(0.01);
    let mc = mc_transform_oracle(&g, 0.01, 0.7, 0.4, 2.0, 50_000, 1.0 / 832.0, 12);
    assert!(mc.z_score(v) < 3.0, "{v} vs {mc:?}");
}

#[test]
fn paper_scale_measure_map() {
    let p = GcirParams::new(1.489, 0.006250, 0.000133, 0.000126, Measure::Physical).unwrap();
    let qp = to_risk_neutral(&p, RiskPrice(-41.098)).unwrap();
    assert_eq!(qp.kappa, 1.489 + 0.000126 * -41.098);
    assert!((implied_lambda(&p, &qp).unwrap().0 + 41.098).abs() < 1e-9);
}

proptest! {
    #[test]
    fn terminal_condition_is_exact(
        kappa in 0.01f64..5.0, theta in -0.05f64..0.2, alpha in 0.0f64..0.05,
        beta in 1e-4f64..0.2, c1 in 0.0f64..3.0, c2 in -1.0f64..3.0,
    ) {
        let c = affine_coefficients(&q(kappa, theta, alpha, beta), c1, c2, 0.0).unwrap();
        prop_assert_eq!((c.a, c.b), (0.0, c2));
    }

    #[test]
    fn measure_map_round_trips(
        kappa in 0.05f64..3.0, theta in -0.02f64..0.1, alpha in 1e-6f64..0.01,
        beta in 1e-6f64..0.1, lambda in -5.0f64..5.0,
    ) {
        let p = GcirParams::new(kappa, theta, alpha, beta, Measure::Physical).unwrap();
        prop_assume!(kappa + beta * lambda > 0.01);
        let qp = to_risk_neutral(&p, RiskPrice(lambda)).unwrap();
        let lhs = (beta * qp.theta + alpha) * qp.kappa;
        let rhs = (beta * theta + alpha) * kappa;
        prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1e-300) + 1e-18);
        let back = implied_lambda(&p, &qp).unwrap().0;
        prop_assert!((back - lambda).abs() <= 1e-12 * lambda.abs().max(1.0));
        let same = to_risk_neutral(&p, RiskPrice(0.0)).unwrap();
        prop_assert_eq!((same.kappa, same.theta), (kappa, theta));
    }

    #[test]
    fn discount_slope_is_positive_and_increasing(
        kappa in 0.05f64..3.0, theta in 0.0f64..0.1, beta in 1e-4f64..0.1, tau in 0.01f64..30.0,
    ) {
        prop_assume!(kappa * tau < 20.0);
        let p = q(kappa, theta, 0.0, beta);
        let b1 = affine_coefficients(&p, 1.0, 0.0, tau).unwrap().b;
        let b2 = affine_coefficients(&p, 1.0, 0.0, tau * 1.01).unwrap().b;
        prop_assert!(b1 > 0.0 && b2 > b1);
    }
}
