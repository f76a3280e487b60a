use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rsgcir_core::simulate::stream_rng;
use rsgcir_hmm::*;

fn gaussian_density(y: &DVector<f64>, mu: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let m = y.len() as f64;
    let d = y - mu;
    let q = (d.transpose() * cov.clone().try_inverse().unwrap() * &d)[0];
    (-0.5 * q).exp() / ((2.0 * std::f64::consts::PI).powf(m) * cov.determinant()).sqrt()
}

fn toy_model() -> HmmModel {
    HmmModel::new(
        vec![DVector::from_vec(vec![0.0, 0.5]), DVector::from_vec(vec![1.0, 2.0])],
        vec![
            DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.8]),
            DMatrix::from_row_slice(2, 2, &[0.5, -0.1, -0.1, 0.7]),
        ],
        DMatrix::from_row_slice(2, 2, &[0.85, 0.15, 0.25, 0.75]),
        DVector::from_vec(vec![0.4, 0.6]),
    )
    .unwrap()
}

#[test]
fn forward_backward_matches_path_enumeration() {
    let model = toy_model();
    let y: Vec<DVector<f64>> = [[0.1, 0.4], [1.2, 1.9], [0.8, 2.5], [-0.3, 0.2], [0.9, 1.1], [1.4, 2.2]]
        .iter()
        .map(|r| DVector::from_row_slice(r))
        .collect();
    let n = y.len();
    let mut total = 0.0;
    let mut marginal = vec![[0.0; 2]; n];
    for path in 0..(1u32 << n) {
        let s: Vec<usize> = (0..n).map(|t| ((path >> t) & 1) as usize).collect();
        let mut p = model.init[s[0]];
        for t in 0..n {
            if t > 0 {
                p *= model.trans[(s[t - 1], s[t])];
            }
            p *= gaussian_density(&y[t], &model.means[s[t]], &model.covs[s[t]]);
        }
        total += p;
        for t in 0..n {
            marginal[t][s[t]] += p;
        }
    }
    let fb = forward_backward(&model, &y).unwrap();
    assert!((fb.loglik - total.ln()).abs() < 1e-8, "{} vs {}", fb.loglik, total.ln());
    for t in 0..n {
        for k in 0..2 {
            assert!((fb.gamma[t][k] - marginal[t][k] / total).abs() < 1e-10);
        }
    }
}

fn normals(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

#[test]
fn one_state_fit_is_the_pooled_gaussian() {
    let mut rng = stream_rng(5, 0);
    let y: Vec<DVector<f64>> = (0..300)
        .map(|_| {
            let a = normals(&mut rng);
            DVector::from_vec(vec![1.0 + a, -0.5 + 0.5 * a + 0.3 * normals(&mut rng)])
        })
        .collect();
    let fit = fit_hmm(&y, &FitConfig::new(1, 3)).unwrap();
    let t = y.len() as f64;
    let mean = y.iter().fold(DVector::zeros(2), |a, v| a + v) / t;
    let mut cov = DMatrix::zeros(2, 2);
    for v in &y {
        cov += (v - &mean) * (v - &mean).transpose() / t;
    }
    let closed = -0.5 * t * (2.0 * (2.0 * std::f64::consts::PI).ln() + cov.determinant().ln() + 2.0);
    assert!((&fit.model.means[0] - &mean).amax() < 1e-12);
    assert!((&fit.model.covs[0] - &cov).amax() < 1e-12);
    assert!((fit.loglik - closed).abs() < 1e-8 * closed.abs());
    let c = classify(&fit.model, &y).unwrap();
    assert!(c.labels.iter().all(|&l| l == 0));
}

struct TwoState {
    y: Vec<DVector<f64>>,
    states: Vec<usize>,
}

fn simulate_two_state(seed: u64, n: usize) -> TwoState {
    let mut rng = stream_rng(seed, 0);
    let means = [1.0, 5.0];
    let mut s = 0;
    let mut y = Vec::with_capacity(n);
    let mut states = Vec::with_capacity(n);
    for _ in 0..n {
        if rng.random::<f64>() >= 0.97 {
            s = 1 - s;
        }
        states.push(s);
        y.push(DVector::from_element(1, means[s] + normals(&mut rng)));
    }
    TwoState { y, states }
}

#[test]
fn persistent_two_state_data_is_recovered() {
    let data = simulate_two_state(11, 2000);
    let fit = fit_hmm(&data.y, &FitConfig::new(2, 7)).unwrap();
    assert!(fit.converged);
    assert!((fit.model.means[0][0] - 1.0).abs() < 0.2, "{}", fit.model.means[0]);
    assert!((fit.model.means[1][0] - 5.0).abs() < 0.2, "{}", fit.model.means[1]);
    for i in 0..2 {
        assert!((fit.model.trans[(i, i)] - 0.97).abs() < 0.02, "{}", fit.model.trans);
    }
    for w in fit.loglik_path.windows(2) {
        assert!(w[1] >= w[0] - 1e-10 * w[0].abs(), "EM decreased: {} -> {}", w[0], w[1]);
    }
    let c = classify(&fit.model, &data.y).unwrap();
    let hits = c.labels.iter().zip(&data.states).filter(|(a, b)| a == b).count();
    assert!(hits as f64 / 2000.0 > 0.95);
    for p in &c.probs {
        assert!((p.sum() - 1.0).abs() < 1e-12);
    }

    let one = fit_hmm(&data.y, &FitConfig::new(1, 7)).unwrap();
    let (aic1, bic1) = information_criteria(one.loglik, 1, 1, 2000, CovarianceKind::Full);
    let (aic2, bic2) = information_criteria(fit.loglik, 2, 1, 2000, CovarianceKind::Full);
    assert!(aic2 < aic1 && bic2 < bic1);
}

#[test]
fn fits_are_deterministic_per_seed() {
    let data = simulate_two_state(12, 300);
    let cfg = FitConfig { covariance: CovarianceKind::Diagonal, ..FitConfig::new(3, 4) };
    assert_eq!(fit_hmm(&data.y, &cfg).unwrap(), fit_hmm(&data.y, &cfg).unwrap());
}

#[test]
fn classification_ignores_state_order() {
    let model = toy_model();
    let data = simulate_two_state(13, 50);
    let y: Vec<DVector<f64>> = data.y.iter().map(|v| DVector::from_vec(vec![v[0] * 0.3, v[0] * 0.5])).collect();
    let a = classify(&model, &y).unwrap();
    let b = classify(&model.permuted(&[1, 0]), &y).unwrap();
    assert_eq!(a.labels, b.labels);
    assert!(a.model.level(0) < a.model.level(1));
}

#[test]
fn weekly_persistence_implies_paper_duration() {
    let p = DMatrix::from_row_slice(2, 2, &[0.989, 0.011, 0.024, 0.976]);
    let d = regime_durations(&p, 1.0 / 52.0).unwrap();
    assert!((d[0] - 1.748).abs() < 1e-3);
    assert!((d[0] / 1.77 - 1.0).abs() < 0.02);
    let near_zero = DMatrix::from_row_slice(2, 2, &[1e-12, 1.0 - 1e-12, 0.5, 0.5]);
    assert!((regime_durations(&near_zero, 0.25).unwrap()[0] - 0.25).abs() < 1e-12);
}

#[test]
fn lone_outlier_state_is_floored_and_flagged() {
    let mut rng = stream_rng(14, 0);
    let mut y: Vec<DVector<f64>> = (0..40).map(|_| DVector::from_element(1, normals(&mut rng))).collect();
    y.push(DVector::from_element(1, 100.0));
    let fit = fit_hmm(&y, &FitConfig::new(2, 1)).unwrap();
    assert_eq!(fit.degenerate, vec![1]);
    assert!((fit.model.covs[1][(0, 0)] - 1e-8).abs() < 1e-20);
}

#[test]
fn rows_with_gaps_are_dropped() {
    let mut data = simulate_two_state(15, 100).y;
    data[7] = DVector::from_element(1, f64::NAN);
    let fit = fit_hmm(&data, &FitConfig::new(2, 1)).unwrap();
    assert_eq!(fit.kept.len(), 99);
    assert!(!fit.kept.contains(&7));
    assert!(matches!(fit_hmm(&data[..15], &FitConfig::new(2, 1)), Err(HmmError::TooFewObservations { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn em_never_decreases_the_likelihood(seed in 0u64..1000, k in 1usize..4) {
        let data = simulate_two_state(seed, 60);
        let cfg = FitConfig { restarts: 1, ..FitConfig::new(k, seed) };
        let fit = fit_hmm(&data.y, &cfg).unwrap();
        for w in fit.loglik_path.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-10 * w[0].abs());
        }
        for i in 0..k {
            prop_assert!((fit.model.trans.row(i).sum() - 1.0).abs() < 1e-10);
        }
    }
}
