use chrono::NaiveDate;
use nalgebra::DMatrix;
use rsgcir_core::affine::{GcirParams, Measure, RiskPrice};
use rsgcir_core::fixtures;
use rsgcir_core::panel::{Segment, DEFAULT_MATURITIES};
use rsgcir_core::pricing::{FactorSpec, ModelSpec, PricingScheme};
use rsgcir_core::regimes::CtmcGenerator;
use rsgcir_core::simulate::{simulate_panel, NoiseConfig, PanelDesign, SyntheticPanel};
use rsgcir_filter::blocks::*;
use rsgcir_filter::moments::GcirTransition;
use rsgcir_filter::pricing_errors::{fitted_sovereign_yields, pricing_error_stats};
use rsgcir_filter::ukf::{ukf_step, GaussianBelief, UtParams};

const BURN_IN: usize = 20;

fn design(weeks: usize, segments: Vec<Segment>, rate_sd: Vec<f64>, credit_sd: Vec<f64>) -> PanelDesign {
    PanelDesign {
        start: NaiveDate::from_ymd_opt(2014, 1, 3).unwrap(),
        weeks,
        maturities: DEFAULT_MATURITIES.to_vec(),
        segments,
        noise: NoiseConfig { rate_sd, credit_sd },
        substeps: 16,
        burn_in: 52,
        scheme: PricingScheme::default(),
    }
}

fn single_regime_model() -> ModelSpec {
    let base = fixtures::toy_two_regime_model();
    ModelSpec {
        rate_factors: vec![base.rate_factors[0]],
        qr: CtmcGenerator::single("L"),
        passthrough: DMatrix::from_element(1, 1, 0.2),
        ..base
    }
}

fn rate_panel(m: &ModelSpec, sd: f64, weeks: usize, seed: u64) -> SyntheticPanel {
    let d = design(weeks, vec![Segment::Cgb, Segment::Cdb], vec![sd; m.n_rate()], vec![0.001; m.n_credit()]);
    simulate_panel(m, &d, seed).unwrap()
}

#[test]
fn single_regime_rate_filter_is_the_plain_ukf() {
    let m = single_regime_model();
    let sim = rate_panel(&m, 5e-4, 200, 21);
    let noise = NoiseConfig { rate_sd: vec![5e-4], credit_sd: vec![0.001] };
    let out = rate_block_filter(&sim.panel, &m, &noise, &FilterConfig::default()).unwrap();

    let (columns, maps) = sovereign_measurements(&sim.panel, &m).unwrap();
    let params: Vec<_> = m.rate_factors[0].iter().map(|f| f.physical).collect();
    let f = GcirTransition::new(params.clone(), m.grid_delta);
    let r = DMatrix::from_diagonal_element(columns.len(), columns.len(), 25e-8);
    let var = nalgebra::DVector::from_iterator(3, params.iter().map(|p| p.stationary_variance()));
    let mut b = GaussianBelief::new(
        nalgebra::DVector::from_iterator(3, params.iter().map(|p| p.theta)),
        DMatrix::from_diagonal(&var),
    )
    .unwrap();
    let mut ll = 0.0;
    for row in &sim.panel.values {
        let y: Vec<Option<f64>> = columns.iter().map(|&j| row[j]).collect();
        let step = ukf_step(&b, &y, &f, &maps[0], &r, &UtParams::default()).unwrap();
        ll += step.update.loglik;
        b = step.update.posterior;
    }
    assert!((out.loglik - ll).abs() < 1.0, "{} vs {ll}", out.loglik);
    assert!(out.summaries.iter().all(|s| s.probs == [1.0]));
}

fn regime_hit_rate(probs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = probs.collect();
    v.iter().filter(|p| **p > 0.9).count() as f64 / v.len() as f64
}

#[test]
fn two_regime_rate_filter_recovers_the_regime_path() {
    let m = fixtures::toy_two_regime_model();
    let sim = rate_panel(&m, 5e-4, 550, 22);
    let noise = NoiseConfig { rate_sd: vec![5e-4; 2], credit_sd: vec![0.001] };
    let out = rate_block_filter(&sim.panel, &m, &noise, &FilterConfig::default()).unwrap();
    let hit = regime_hit_rate((BURN_IN..550).map(|t| out.summaries[t].probs[sim.truth.rate_regime[t]]));
    let visited: std::collections::BTreeSet<usize> = sim.truth.rate_regime.iter().copied().collect();
    assert_eq!(visited.len(), 2, "both regimes should occur");
    assert!(hit > 0.8, "hit rate {hit}");
    for s in &out.summaries {
        assert!((s.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn inflating_measurement_noise_lowers_the_likelihood() {
    let m = fixtures::toy_two_regime_model();
    let sim = rate_panel(&m, 5e-4, 150, 23);
    let ll = |sd: f64| {
        let noise = NoiseConfig { rate_sd: vec![sd; 2], credit_sd: vec![0.001] };
        rate_block_filter(&sim.panel, &m, &noise, &FilterConfig::default()).unwrap().loglik
    };
    assert!(ll(5e-4) > ll(1e-3));
}

/// Reference model with fast, well-separated credit-factor levels, so the
/// credit regime shows up in the level of corporate yields within weeks.
fn separated_credit_model() -> ModelSpec {
    let base = fixtures::reference_model();
    let factor = |theta| {
        let p = GcirParams::new(2.0, theta, 1e-4, 0.05, Measure::Physical).unwrap();
        FactorSpec::new(p, RiskPrice(-0.5)).unwrap()
    };
    ModelSpec { credit_factors: vec![factor(1.0), factor(2.5)], ..base }
}

fn joint_panel(seed: u64) -> (ModelSpec, SyntheticPanel, NoiseConfig) {
    let m = separated_credit_model();
    let mut segments = vec![Segment::Cgb, Segment::Cdb];
    segments.extend_from_slice(&Segment::CORPORATE);
    let noise = NoiseConfig { rate_sd: vec![5e-4; 2], credit_sd: vec![1e-3; 2] };
    let d = design(400, segments, noise.rate_sd.clone(), noise.credit_sd.clone());
    let sim = simulate_panel(&m, &d, seed).unwrap();
    (m, sim, noise)
}

#[test]
fn credit_filter_recovers_credit_regimes() {
    let (m, sim, noise) = joint_panel(24);
    let cfg = FilterConfig::default();
    let rate = rate_block_filter(&sim.panel, &m, &noise, &cfg).unwrap();
    let credit = credit_block_filter(&sim.panel, &m, &noise, &rate.summaries, &cfg).unwrap();
    for p in &credit.marginal {
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let n = sim.panel.n_dates();
    let correct = (BURN_IN..n)
        .filter(|&t| {
            let p = &credit.marginal[t];
            let guess = if p[1] > p[0] { 1 } else { 0 };
            guess == sim.truth.credit_regime[t]
        })
        .count();
    let accuracy = correct as f64 / (n - BURN_IN) as f64;
    assert!(accuracy > 0.75, "credit accuracy {accuracy}");
    assert!(credit.loglik.is_finite());
}

#[test]
fn point_mass_rate_beliefs_select_one_conditional_filter() {
    let (m, sim, noise) = joint_panel(25);
    let cfg = FilterConfig::default();
    let mut rate = rate_block_filter(&sim.panel, &m, &noise, &cfg).unwrap();
    for s in &mut rate.summaries {
        s.probs = vec![0.0, 1.0];
    }
    let credit = credit_block_filter(&sim.panel, &m, &noise, &rate.summaries, &cfg).unwrap();
    for t in 0..sim.panel.n_dates() {
        assert_eq!(credit.marginal[t], credit.conditional[t][1].regimes.probs());
    }
}

#[test]
fn regime_switching_filter_prices_a_switching_panel_better() {
    let m = fixtures::toy_two_regime_model();
    let sim = rate_panel(&m, 5e-4, 550, 22);
    let average_rrmse = |model: &ModelSpec, sd: Vec<f64>| {
        let noise = NoiseConfig { rate_sd: sd, credit_sd: vec![0.001] };
        let out = rate_block_filter(&sim.panel, model, &noise, &FilterConfig::default()).unwrap();
        let (columns, fitted) = fitted_sovereign_yields(&sim.panel, model, &out).unwrap();
        let stats = pricing_error_stats(&sim.panel, &columns, &fitted);
        assert_eq!(stats.len(), 2 * DEFAULT_MATURITIES.len());
        stats.iter().map(|s| s.rrmse).sum::<f64>() / stats.len() as f64
    };
    let switching = average_rrmse(&m, vec![5e-4; 2]);
    let single = average_rrmse(&single_regime_model(), vec![5e-4]);
    println!("average RRMSE: switching {switching:.5}, single {single:.5}");
    assert!(switching < single);
}
