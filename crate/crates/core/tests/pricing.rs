use nalgebra::DMatrix;
use proptest::prelude::*;
use rsgcir_core::affine::{affine_coefficients, GcirParams, Measure, RiskPrice};
use rsgcir_core::fixtures::{self, WEEK};
use rsgcir_core::linalg::expm;
use rsgcir_core::pricing::*;
use rsgcir_core::regimes::CtmcGenerator;

fn closed_form_price(params: &[GcirParams; 4], loadings: &State, x: &State, tau: f64) -> f64 {
    (0..4)
        .map(|k| {
            if loadings[k] == 0.0 {
                1.0
            } else {
                affine_coefficients(&params[k], loadings[k], 0.0, tau).unwrap().value(x[k])
            }
        })
        .product()
}

/// Both rate regimes share the low-regime parameters.
fn degenerate_model() -> ModelSpec {
    let base = fixtures::toy_two_regime_model();
    let same = base.rate_factors[0];
    ModelSpec { rate_factors: vec![same, same], passthrough: DMatrix::from_element(2, 1, 0.2), ..base }
}

const X: State = [0.018, 0.011, 0.0025, 0.012];

#[test]
fn regime_degenerate_recursion_matches_closed_form() {
    let m = degenerate_model();
    let q = m.q_params(0, 0);
    for curve in [Curve::Cgb, Curve::Cdb] {
        let curves = discount_curve(&m, curve, &X, &[1, 52, 260, 520], PricingScheme::default()).unwrap();
        for p in &curves {
            let exact = closed_form_price(&q, &short_rate_loadings(curve), &X, p.maturity);
            for v in &p.values {
                assert!((v - exact).abs() < 1e-10, "{curve:?} {} {v} vs {exact}", p.maturity);
            }
        }
    }
    let lando = &m.rating_model().unwrap().lando;
    for (j, &d) in lando.modes.iter().enumerate() {
        let u = corporate_mode_values(&m, j, &X, 520).unwrap();
        let exact = closed_form_price(&q, &mode_loadings(&m, d, 0, 0), &X, 520.0 * WEEK);
        for v in &u.values {
            assert!((v - exact).abs() < 1e-10);
        }
    }
}

#[test]
fn frozen_regimes_price_each_regime_in_closed_form() {
    let base = fixtures::toy_two_regime_model();
    let frozen = CtmcGenerator::new(DMatrix::zeros(2, 2), vec!["L".into(), "H".into()]).unwrap();
    let m = ModelSpec { qr: frozen, ..base };
    let p = discount_bond_prices(&m, Curve::Cdb, &X, 260).unwrap();
    for s in 0..2 {
        let exact = closed_form_price(&m.q_params(s, 0), &short_rate_loadings(Curve::Cdb), &X, 5.0);
        assert!((p.values[s] - exact).abs() < 1e-12);
    }
}

#[test]
fn constant_rate_and_driver_match_analytic_survival_pricing() {
    let zero = |theta| {
        let p = GcirParams::zero_diffusion(0.7, theta, Measure::Physical).unwrap();
        FactorSpec {
            physical: p,
            lambda: RiskPrice(0.0),
            risk_neutral: GcirParams { measure: Measure::RiskNeutral, ..p },
        }
    };
    let x: State = [0.02, 0.01, 0.003, 0.015];
    let generator = fixtures::two_rating_generator();
    let m = ModelSpec::new(
        vec![[zero(x[0]), zero(x[1]), zero(x[2])]],
        vec![zero(x[3])],
        CtmcGenerator::single("L"),
        CtmcGenerator::single("E"),
        DMatrix::from_element(1, 1, 0.4),
        Some(fixtures::rating_model(generator.clone())),
        WEEK,
    )
    .unwrap();
    let r = x[0] + x[1] + x[2];
    let mu = mu_driver(&m, &x, 0, 0);
    for n in [52, 260, 520] {
        let tau = n as f64 * WEEK;
        let default = expm(&(generator.full_generator() * (mu * tau))).unwrap();
        for i in 0..2 {
            let v = corporate_price(&m, i, &x, n).unwrap().values[0];
            let exact = (-r * tau).exp() * (1.0 - default[(i, 2)]);
            assert!((v - exact).abs() < 1e-12, "{v} vs {exact}");
        }
    }
}

#[test]
fn prices_start_at_one_and_stay_positive() {
    let m = fixtures::reference_model();
    let modes = corporate_mode_curves(&m, &X_REF, &[0, 52, 520], PricingScheme::default()).unwrap();
    for mode in &modes {
        assert!(mode[0].values.iter().all(|v| *v == 1.0));
        for p in mode {
            assert!(p.values.iter().all(|v| *v > 0.0));
        }
    }
    let cdb = discount_curve(&m, Curve::Cdb, &X_REF, &[0, 52, 520], PricingScheme::default()).unwrap();
    assert!(cdb[0].values.iter().all(|v| *v == 1.0));
}

const X_REF: State = [0.02, 0.011, 0.003, 1.2];

#[test]
fn corporate_prices_fall_with_rating_and_sit_below_policy_bank_prices() {
    let m = fixtures::reference_model();
    let lando = &m.rating_model().unwrap().lando;
    let modes: Vec<RegimePriceVector> = corporate_mode_curves(&m, &X_REF, &[260], PricingScheme::default())
        .unwrap()
        .into_iter()
        .map(|mut v| v.remove(0))
        .collect();
    let cdb = discount_curve(&m, Curve::Cdb, &X_REF, &[260], PricingScheme::default()).unwrap().remove(0);
    let prices: Vec<RegimePriceVector> = (0..5).map(|i| combine_modes(lando, i, &modes)).collect();
    for s in 0..m.n_joint() {
        let rate = s / m.n_credit();
        assert!(prices[0].values[s] < cdb.values[rate]);
        for i in 1..5 {
            assert!(prices[i].values[s] < prices[i - 1].values[s], "rating {i} regime {s}");
        }
    }
    let direct = corporate_price(&m, 2, &X_REF, 260).unwrap();
    assert!((direct.values[3] - prices[2].values[3]).abs() < 1e-15);
}

#[test]
fn collapsed_scheme_is_close_to_mixture_near_reference() {
    let m = fixtures::reference_model();
    let reference = m.reference_state();
    let full = discount_curve(&m, Curve::Cgb, &reference, &[520], PricingScheme::default()).unwrap();
    let coeffs = sovereign_coefficients(&m, Curve::Cgb, &reference, &[520]).unwrap();
    for s in 0..2 {
        let collapsed = coeffs[0][s].value(&reference);
        assert!((collapsed - full[0].values[s]).abs() < 1e-4 * full[0].values[s]);
    }
}

#[test]
fn term_cap_is_respected() {
    let m = fixtures::reference_model();
    let p = rsgcir_core::regimes::transition_matrix(&m.qr, m.grid_delta).unwrap().p;
    let kernels: Vec<RegimeKernel> =
        (0..2).map(|s| RegimeKernel { params: m.q_params(s, 0), loadings: short_rate_loadings(Curve::Cgb) }).collect();
    let out = backward_recursion(&kernels, &p, WEEK, &[520], PricingScheme::Mixture { max_terms: 64 }, &X).unwrap();
    assert!(out.stats.max_terms <= 64);
    assert!(out.functions[0].iter().all(|f| f.len() <= 64));
    let fine = backward_recursion(&kernels, &p, WEEK, &[520], PricingScheme::default(), &X).unwrap();
    for s in 0..2 {
        let (a, b) = (out.price(0, s, &X), fine.price(0, s, &X));
        assert!((a - b).abs() < 1e-6 * b, "{a} vs {b}");
    }
}

fn reference_corporate_prices() -> &'static RegimePriceVector {
    static PRICES: std::sync::OnceLock<RegimePriceVector> = std::sync::OnceLock::new();
    PRICES.get_or_init(|| corporate_price(&fixtures::reference_model(), 1, &X_REF, 260).unwrap())
}

proptest! {
    #[test]
    fn mixed_prices_lie_between_regime_prices(w in proptest::collection::vec(0.001f64..1.0, 4)) {
        let total: f64 = w.iter().sum();
        let beliefs: Vec<f64> = w.iter().map(|v| v / total).collect();
        let p = reference_corporate_prices();
        let mixed = mix_prices(p, &beliefs).unwrap();
        let lo = p.values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = p.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(mixed >= lo * (1.0 - 1e-12) && mixed <= hi * (1.0 + 1e-12));
    }

    #[test]
    fn spread_components_reconstruct_the_corporate_yield(
        a in -0.01f64..0.1, b in -0.01f64..0.1, c in -0.01f64..0.2,
    ) {
        let s = spread_decomposition(a, b, c);
        prop_assert!((s.corporate_yield() - c).abs() <= 4.0 * f64::EPSILON * c.abs().max(1.0));
    }

    #[test]
    fn yield_round_trip(y in -0.05f64..0.5, tau in 0.1f64..30.0) {
        let back = price_to_yield((-y * tau).exp(), tau).unwrap();
        prop_assert!((back - y).abs() < 1e-14);
    }
}
