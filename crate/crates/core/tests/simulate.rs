use rsgcir_core::affine::{affine_coefficients, GcirParams, Measure};
use rsgcir_core::regimes::{stationary_distribution, CtmcGenerator};
use rsgcir_core::simulate::*;

#[test]
fn occupation_fractions_approach_stationarity() {
    let g = CtmcGenerator::two_state(0.5, 0.8, ["L", "H"]).unwrap();
    let path = simulate_ctmc(&g, 0, 10_000.0, &mut stream_rng(17, 0));
    let occ = path.occupation(2);
    let pi = stationary_distribution(&g).unwrap();
    for s in 0..2 {
        let frac = occ[s] / 10_000.0;
        assert!((frac - pi[s]).abs() < 0.02 * pi[s], "{frac} vs {}", pi[s]);
    }
}

#[test]
fn holding_times_are_exponential_with_the_right_mean() {
    let g = CtmcGenerator::two_state(0.5, 0.8, ["L", "H"]).unwrap();
    let path = simulate_ctmc(&g, 0, 20_000.0, &mut stream_rng(18, 0));
    let holds: Vec<f64> = (0..path.states.len() - 1)
        .filter(|&k| path.states[k] == 0)
        .map(|k| path.times[k + 1] - path.times[k])
        .collect();
    let est = McEstimate::from_samples(holds.iter().copied());
    assert!(est.z_score(1.0 / 0.5) < 3.0, "{est:?}");
}

#[test]
fn long_run_mean_is_theta() {
    let p = GcirParams::new(1.0, 0.04, 0.0, 0.01, Measure::Physical).unwrap();
    let dt = 1.0 / 832.0;
    let path = simulate_gcir(&[p], 0.04, 500.0, dt, None, &mut stream_rng(19, 0));
    // Batch means over unit-length windows are roughly independent.
    let per = (1.0 / dt) as usize;
    let batches = path[1..].chunks(per).map(|c| c.iter().sum::<f64>() / c.len() as f64);
    let est = McEstimate::from_samples(batches);
    assert!(est.z_score(0.04) < 3.0, "{est:?}");
}

#[test]
fn feller_paths_rarely_touch_the_floor() {
    let p = GcirParams::new(0.5, 0.05, 0.0, 0.02, Measure::Physical).unwrap();
    let path = simulate_gcir(&[p], 0.05, 200.0, 1.0 / 832.0, None, &mut stream_rng(20, 0));
    let floored = path.iter().filter(|x| **x < 0.0).count();
    assert!((floored as f64) < 1e-3 * path.len() as f64);
}

#[test]
fn regime_path_switches_parameters() {
    let lo = GcirParams::zero_diffusion(5.0, 0.0, Measure::Physical).unwrap();
    let hi = GcirParams::zero_diffusion(5.0, 1.0, Measure::Physical).unwrap();
    let regimes = RegimePath { times: vec![0.0, 5.0], states: vec![0, 1], horizon: 10.0 };
    let path = simulate_gcir(&[lo, hi], 0.0, 10.0, 1e-3, Some(&regimes), &mut stream_rng(1, 0));
    assert!(path[4_999].abs() < 1e-12);
    assert!((path[10_000] - 1.0).abs() < 1e-9);
}

#[test]
fn standard_error_scales_with_root_paths() {
    let p = GcirParams::new(0.5, 0.05, 0.001, 0.02, Measure::RiskNeutral).unwrap();
    let small = mc_transform_oracle(&p, 0.03, 1.0, 0.0, 1.0, 10_000, 1.0 / 208.0, 5);
    let large = mc_transform_oracle(&p, 0.03, 1.0, 0.0, 1.0, 40_000, 1.0 / 208.0, 6);
    let ratio = small.std_err / large.std_err;
    assert!((ratio - 2.0).abs() < 0.1, "{ratio}");
    let exact = affine_coefficients(&p, 1.0, 0.0, 1.0).unwrap().value(0.03);
    assert!(large.z_score(exact) < 3.0);
}

mod panels {
    use chrono::NaiveDate;
    use nalgebra::DMatrix;
    use rsgcir_core::affine::affine_coefficients;
    use rsgcir_core::fixtures;
    use rsgcir_core::panel::{Segment, DEFAULT_MATURITIES};
    use rsgcir_core::pricing::{short_rate_loadings, Curve, ModelSpec, PricingScheme};
    use rsgcir_core::regimes::CtmcGenerator;
    use rsgcir_core::simulate::*;

    fn design(rate_sd: f64, credit_sd: f64, n_rate: usize, n_credit: usize) -> PanelDesign {
        PanelDesign {
            start: NaiveDate::from_ymd_opt(2014, 1, 3).unwrap(),
            weeks: 150,
            maturities: DEFAULT_MATURITIES.to_vec(),
            segments: vec![Segment::Cgb, Segment::Cdb, Segment::Aaa, Segment::AaMinus],
            noise: NoiseConfig { rate_sd: vec![rate_sd; n_rate], credit_sd: vec![credit_sd; n_credit] },
            substeps: 16,
            burn_in: 10,
            scheme: PricingScheme::default(),
        }
    }

    fn single_regime() -> ModelSpec {
        let base = fixtures::reference_model();
        ModelSpec {
            rate_factors: vec![base.rate_factors[0]],
            credit_factors: vec![base.credit_factors[0]],
            qr: CtmcGenerator::single("L"),
            qc: CtmcGenerator::single("E"),
            passthrough: DMatrix::from_element(1, 1, 2.0),
            ..base
        }
    }

    #[test]
    fn noiseless_single_regime_panel_is_closed_form() {
        let m = single_regime();
        let sim = simulate_panel(&m, &design(0.0, 0.0, 1, 1), 42).unwrap();
        let q = m.q_params(0, 0);
        for (t, x) in sim.truth.factors.iter().enumerate() {
            for (j, s) in sim.panel.series.iter().enumerate() {
                let curve = match s.segment {
                    Segment::Cgb => Curve::Cgb,
                    Segment::Cdb => Curve::Cdb,
                    _ => continue,
                };
                let l = short_rate_loadings(curve);
                let log_price: f64 = (0..3)
                    .filter(|&k| l[k] != 0.0)
                    .map(|k| {
                        let c = affine_coefficients(&q[k], 1.0, 0.0, s.maturity).unwrap();
                        c.a - c.b * x[k]
                    })
                    .sum();
                let y = sim.panel.values[t][j].unwrap();
                assert!((y + log_price / s.maturity).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn noise_scales_residuals_and_runs_are_reproducible() {
        let m = fixtures::reference_model();
        let base = simulate_panel(&m, &design(0.0, 0.0, 2, 2), 7).unwrap();
        let one = simulate_panel(&m, &design(1e-3, 2e-3, 2, 2), 7).unwrap();
        let two = simulate_panel(&m, &design(2e-3, 4e-3, 2, 2), 7).unwrap();
        assert_eq!(one, simulate_panel(&m, &design(1e-3, 2e-3, 2, 2), 7).unwrap());
        assert_eq!(base.truth, one.truth);
        let rms = |a: &SyntheticPanel| {
            let mut acc = (0.0, 0.0);
            for t in 0..a.panel.n_dates() {
                for j in 0..a.panel.series.len() {
                    let d = a.panel.values[t][j].unwrap() - base.panel.values[t][j].unwrap();
                    acc = (acc.0 + d * d, acc.1 + 1.0);
                }
            }
            (acc.0 / acc.1).sqrt()
        };
        let ratio = rms(&two) / rms(&one);
        assert!((ratio - 2.0).abs() < 0.2, "{ratio}");
        // Corporate yields exceed CDB yields at each maturity.
        let p = &base.panel;
        for t in 0..p.n_dates() {
            for &mat in &DEFAULT_MATURITIES {
                let cdb = p.values[t][p.column(Segment::Cdb, mat).unwrap()].unwrap();
                let aaa = p.values[t][p.column(Segment::Aaa, mat).unwrap()].unwrap();
                let weak = p.values[t][p.column(Segment::AaMinus, mat).unwrap()].unwrap();
                assert!(cdb < aaa && aaa < weak);
            }
        }
    }
}
