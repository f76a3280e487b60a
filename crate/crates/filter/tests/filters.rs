use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rsgcir_core::affine::{GcirParams, Measure};
use rsgcir_core::simulate::{euler_step, stream_rng, McEstimate};
use rsgcir_filter::moments::factor_moments;
use rsgcir_filter::rsukf::{rs_ukf_step, RegimeBeliefs, RegimeModel, RsBelief};
use rsgcir_filter::ukf::*;

/// Textbook Kalman filter step: returns the posterior and log predictive
/// density.
fn kalman_step(
    prior: &GaussianBelief,
    y: &DVector<f64>,
    f: &LinearTransition,
    h: &AffineMeasurement,
    r: &DMatrix<f64>,
) -> (GaussianBelief, f64) {
    let m = &f.f * &prior.mean + &f.c;
    let p = &f.f * &prior.cov * f.f.transpose() + &f.q;
    let s = &h.h * &p * h.h.transpose() + r;
    let s_inv = s.clone().try_inverse().unwrap();
    let k = &p * h.h.transpose() * &s_inv;
    let e = y - (&h.h * &m + &h.d);
    let n = y.len() as f64;
    let ll = -0.5 * (n * (2.0 * std::f64::consts::PI).ln() + s.determinant().ln() + (e.transpose() * &s_inv * &e)[0]);
    let mean = &m + &k * &e;
    let cov = (DMatrix::identity(p.nrows(), p.nrows()) - &k * &h.h) * &p;
    (GaussianBelief { mean, cov }, ll)
}

fn random_spd(rng: &mut impl Rng, n: usize, scale: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    (&a * a.transpose() + DMatrix::identity(n, n) * 0.1) * scale
}

fn linear_model(rng: &mut impl Rng) -> (LinearTransition, AffineMeasurement, DMatrix<f64>) {
    let f = LinearTransition {
        f: DMatrix::from_fn(3, 3, |i, j| if i == j { 0.8 } else { rng.random_range(-0.1..0.1) }),
        c: DVector::from_fn(3, |_, _| rng.random_range(-0.1..0.1)),
        q: random_spd(rng, 3, 0.05),
    };
    let h = AffineMeasurement {
        h: DMatrix::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0)),
        d: DVector::from_fn(4, |_, _| rng.random_range(-0.5..0.5)),
    };
    (f, h, random_spd(rng, 4, 0.1))
}

#[test]
fn ukf_equals_exact_kalman_filter_on_linear_models() {
    let mut rng = stream_rng(7, 0);
    for _ in 0..10 {
        let (f, h, r) = linear_model(&mut rng);
        let mut ukf = GaussianBelief::new(DVector::zeros(3), random_spd(&mut rng, 3, 1.0)).unwrap();
        let mut kf = ukf.clone();
        for _ in 0..25 {
            let y = DVector::from_fn(4, |_, _| rng.random_range(-2.0..2.0));
            let obs: Vec<Option<f64>> = y.iter().map(|v| Some(*v)).collect();
            let step = ukf_step(&ukf, &obs, &f, &h, &r, &UtParams::default()).unwrap();
            let (post, ll) = kalman_step(&kf, &y, &f, &h, &r);
            assert!((&step.update.posterior.mean - &post.mean).amax() < 1e-10);
            assert!((&step.update.posterior.cov - &post.cov).amax() < 1e-10);
            assert!((step.update.loglik - ll).abs() < 1e-10, "{} vs {ll}", step.update.loglik);
            ukf = step.update.posterior;
            kf = post;
        }
    }
}

#[test]
fn missing_entries_are_dropped_from_the_update() {
    let mut rng = stream_rng(8, 0);
    let (f, h, r) = linear_model(&mut rng);
    let prior = GaussianBelief::new(DVector::zeros(3), random_spd(&mut rng, 3, 1.0)).unwrap();
    let obs = [Some(0.4), None, Some(-0.3), None];
    let step = ukf_step(&prior, &obs, &f, &h, &r, &UtParams::default()).unwrap();
    let keep = [0usize, 2];
    let h2 = AffineMeasurement { h: h.h.select_rows(&keep), d: h.d.select_rows(&keep) };
    let r2 = r.select_rows(&keep).select_columns(&keep);
    let (post, ll) = kalman_step(&prior, &DVector::from_vec(vec![0.4, -0.3]), &f, &h2, &r2);
    assert!((&step.update.posterior.mean - &post.mean).amax() < 1e-10);
    assert!((step.update.loglik - ll).abs() < 1e-10);
    assert_eq!(step.update.observed, keep.to_vec());
}

#[test]
fn near_perfect_observation_enforces_the_constraint() {
    let prior = GaussianBelief::new(DVector::from_vec(vec![1.0, -1.0]), DMatrix::identity(2, 2)).unwrap();
    let h = AffineMeasurement { h: DMatrix::from_row_slice(1, 2, &[1.0, 2.0]), d: DVector::zeros(1) };
    let u = update(&prior, &[Some(0.5)], &h, &DMatrix::from_element(1, 1, 1e-14), &UtParams::default()).unwrap();
    assert!((u.posterior.mean[0] + 2.0 * u.posterior.mean[1] - 0.5).abs() < 1e-6);
}

fn single_regime_belief(b: &GaussianBelief) -> RsBelief {
    RsBelief { states: vec![b.clone()], regimes: RegimeBeliefs::new(vec![1.0]).unwrap() }
}

#[test]
fn single_regime_rs_ukf_is_the_ukf() {
    let mut rng = stream_rng(9, 0);
    let (f, h, r) = linear_model(&mut rng);
    let mut plain = GaussianBelief::new(DVector::zeros(3), random_spd(&mut rng, 3, 1.0)).unwrap();
    let mut rs = single_regime_belief(&plain);
    let models = [RegimeModel { transition: &f, measurement: &h, noise_cov: &r }];
    let p = DMatrix::from_element(1, 1, 1.0);
    for t in 0..30 {
        let y: Vec<Option<f64>> = (0..4).map(|i| (t % 7 != 3 || i == 0).then(|| rng.random_range(-1.0..1.0))).collect();
        let a = ukf_step(&plain, &y, &f, &h, &r, &UtParams::default()).unwrap();
        let b = rs_ukf_step(&rs, &y, &models, &p, &UtParams::default()).unwrap();
        assert_eq!(a.update.loglik, b.loglik);
        assert_eq!(a.update.posterior, b.posterior.states[0]);
        plain = a.update.posterior;
        rs = b.posterior;
    }
}

#[test]
fn identical_regimes_leave_regime_beliefs_at_their_prediction() {
    let mut rng = stream_rng(10, 0);
    let (f, h, r) = linear_model(&mut rng);
    let prior = GaussianBelief::new(DVector::zeros(3), DMatrix::identity(3, 3)).unwrap();
    let mut b = RsBelief { states: vec![prior.clone(), prior], regimes: RegimeBeliefs::new(vec![0.3, 0.7]).unwrap() };
    let models = [
        RegimeModel { transition: &f, measurement: &h, noise_cov: &r },
        RegimeModel { transition: &f, measurement: &h, noise_cov: &r },
    ];
    let p = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.25, 0.75]);
    for _ in 0..5 {
        let y: Vec<Option<f64>> = (0..4).map(|_| Some(rng.random_range(-1.0..1.0))).collect();
        let step = rs_ukf_step(&b, &y, &models, &p, &UtParams::default()).unwrap();
        for (a, c) in step.posterior.regimes.probs().iter().zip(&step.predicted_probs) {
            assert!((a - c).abs() < 1e-14);
        }
        b = step.posterior;
    }
}

#[test]
fn fully_missing_date_only_propagates() {
    let mut rng = stream_rng(11, 0);
    let (f, h, r) = linear_model(&mut rng);
    let (g, _, r2) = linear_model(&mut rng);
    let prior = GaussianBelief::new(DVector::zeros(3), DMatrix::identity(3, 3)).unwrap();
    let b = RsBelief { states: vec![prior.clone(), prior], regimes: RegimeBeliefs::new(vec![0.4, 0.6]).unwrap() };
    let models = [
        RegimeModel { transition: &f, measurement: &h, noise_cov: &r },
        RegimeModel { transition: &g, measurement: &h, noise_cov: &r2 },
    ];
    let p = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.25, 0.75]);
    let step = rs_ukf_step(&b, &[None; 4], &models, &p, &UtParams::default()).unwrap();
    assert_eq!(step.loglik, 0.0);
    assert_eq!(step.posterior.regimes.probs(), &step.predicted_probs[..]);
    let collapsed = gray_collapse(b.regimes.probs(), &b.states);
    assert_eq!(step.posterior.states[1], predict(&collapsed, &g, &UtParams::default()).unwrap());
}

/// Two-regime scalar model with regime-dependent dynamics and noise.
struct Toy {
    transitions: [LinearTransition; 2],
    measurement: AffineMeasurement,
    noise: [DMatrix<f64>; 2],
    p: DMatrix<f64>,
    pi0: [f64; 2],
    prior: GaussianBelief,
}

fn toy() -> Toy {
    let lin = |f: f64, c: f64, q: f64| LinearTransition {
        f: DMatrix::from_element(1, 1, f),
        c: DVector::from_element(1, c),
        q: DMatrix::from_element(1, 1, q),
    };
    Toy {
        transitions: [lin(0.9, 0.0, 0.1), lin(0.5, 1.0, 0.3)],
        measurement: AffineMeasurement { h: DMatrix::from_element(1, 1, 1.0), d: DVector::zeros(1) },
        noise: [DMatrix::from_element(1, 1, 0.2), DMatrix::from_element(1, 1, 0.5)],
        p: DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.2, 0.8]),
        pi0: [0.5, 0.5],
        prior: GaussianBelief::new(DVector::zeros(1), DMatrix::from_element(1, 1, 1.0)).unwrap(),
    }
}

/// Exact likelihood by enumerating every regime path with a Kalman filter
/// per path.
fn enumerate_paths(m: &Toy, ys: &[f64]) -> f64 {
    let t = ys.len();
    let mut total = 0.0;
    for code in 0..(1usize << t) {
        let path: Vec<usize> = (0..t).map(|k| (code >> k) & 1).collect();
        let mut prob = (0..2).map(|i| m.pi0[i] * m.p[(i, path[0])]).sum::<f64>();
        for k in 1..t {
            prob *= m.p[(path[k - 1], path[k])];
        }
        let mut b = m.prior.clone();
        let mut ll = 0.0;
        for k in 0..t {
            let (post, l) = kalman_step(
                &b,
                &DVector::from_element(1, ys[k]),
                &m.transitions[path[k]],
                &m.measurement,
                &m.noise[path[k]],
            );
            ll += l;
            b = post;
        }
        total += prob * ll.exp();
    }
    total.ln()
}

/// Approximation gap of the collapsed filter on the five-date toy, pinned
/// from the first run.
const GRAY_COLLAPSE_GAP: f64 = 2.906_294_688_407_121e-1;

#[test]
fn collapsed_filter_tracks_path_enumeration_with_pinned_gap() {
    let m = toy();
    let ys = [0.3, 1.2, 0.8, 2.1, 1.5];
    let exact = enumerate_paths(&m, &ys);
    let models: Vec<RegimeModel<'_, _, _>> = (0..2)
        .map(|j| RegimeModel { transition: &m.transitions[j], measurement: &m.measurement, noise_cov: &m.noise[j] })
        .collect();
    let mut b = RsBelief {
        states: vec![m.prior.clone(), m.prior.clone()],
        regimes: RegimeBeliefs::new(m.pi0.to_vec()).unwrap(),
    };
    let mut ll = 0.0;
    for (k, y) in ys.iter().enumerate() {
        let step = rs_ukf_step(&b, &[Some(*y)], &models, &m.p, &UtParams::default()).unwrap();
        if k == 0 {
            assert!((step.loglik - enumerate_paths(&m, &ys[..1])).abs() < 1e-12, "first step is exact");
        }
        ll += step.loglik;
        b = step.posterior;
    }
    let gap = ll - exact;
    println!("gray collapse gap {gap:.15e} (exact {exact:.12})");
    assert!((gap - GRAY_COLLAPSE_GAP).abs() < 1e-9, "gap {gap:e}");
}

#[test]
fn cir_variance_matches_euler_simulation() {
    let p = GcirParams::new(0.8, 0.04, 0.0, 0.03, Measure::Physical).unwrap();
    let (x0, delta, substeps) = (0.02, 1.0 / 52.0, 64);
    let (mean, var) = factor_moments(&p, x0, delta);
    let mut rng = stream_rng(12, 0);
    let paths = 1_000_000;
    let mut xs = Vec::with_capacity(paths);
    for _ in 0..paths {
        let mut x = x0;
        for _ in 0..substeps {
            let z: f64 = StandardNormal.sample(&mut rng);
            x = euler_step(&p, x, delta / substeps as f64, z);
        }
        xs.push(x);
    }
    let m = McEstimate::from_samples(xs.iter().copied());
    assert!(m.z_score(mean) < 3.0);
    let dev = McEstimate::from_samples(xs.iter().map(|x| (x - m.mean).powi(2)));
    assert!(dev.z_score(var) < 3.0, "variance {var} vs {dev:?}");
}
