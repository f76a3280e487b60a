use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rsgcir_core::affine::{GcirParams, Measure};
use rsgcir_filter::moments::factor_moments;
use rsgcir_filter::rsukf::{bayes_update, RegimeBeliefs};
use rsgcir_filter::ukf::*;

fn normalized(w: &[f64]) -> Vec<f64> {
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

fn spd(entries: &[f64], n: usize) -> DMatrix<f64> {
    let a = DMatrix::from_column_slice(n, n, &entries[..n * n]);
    &a * a.transpose() + DMatrix::identity(n, n) * 0.05
}

fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    a.clone().symmetric_eigen().eigenvalues.min()
}

proptest! {
    #[test]
    fn bayes_update_returns_a_distribution(
        w in prop::collection::vec(0.01f64..1.0, 2..5),
        ll in prop::collection::vec(-5e3f64..50.0, 4),
    ) {
        let pred = normalized(&w);
        let (post, total) = bayes_update(&pred, &ll[..pred.len()]).unwrap();
        prop_assert!(total.is_finite());
        prop_assert!((post.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(post.iter().all(|p| *p >= 0.0));
    }

    #[test]
    fn propagation_preserves_total_probability(
        w in prop::collection::vec(0.01f64..1.0, 3),
        rows in prop::collection::vec(0.01f64..1.0, 9),
    ) {
        let mut p = DMatrix::zeros(3, 3);
        for i in 0..3 {
            let r = normalized(&rows[3 * i..3 * i + 3]);
            for j in 0..3 {
                p[(i, j)] = r[j];
            }
        }
        let next = RegimeBeliefs::new(normalized(&w)).unwrap().propagate(&p);
        prop_assert!((next.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn update_shrinks_a_valid_covariance(
        cov in prop::collection::vec(-1.0f64..1.0, 9),
        h in prop::collection::vec(-1.0f64..1.0, 6),
        y in prop::collection::vec(-2.0f64..2.0, 2),
        r in 0.01f64..1.0,
    ) {
        let prior = GaussianBelief::new(DVector::zeros(3), spd(&cov, 3)).unwrap();
        let map = AffineMeasurement { h: DMatrix::from_row_slice(2, 3, &h), d: DVector::zeros(2) };
        let noise = DMatrix::from_diagonal_element(2, 2, r);
        let u = update(&prior, &[Some(y[0]), Some(y[1])], &map, &noise, &UtParams::default()).unwrap();
        let scale = prior.cov.norm();
        prop_assert!(min_eigenvalue(&u.posterior.cov) > -1e-10 * scale);
        prop_assert!(min_eigenvalue(&(&prior.cov - &u.posterior.cov)) > -1e-10 * scale);
    }

    #[test]
    fn collapse_covers_every_component(
        w in prop::collection::vec(0.01f64..1.0, 2),
        means in prop::collection::vec(-1.0f64..1.0, 4),
        covs in prop::collection::vec(-1.0f64..1.0, 8),
    ) {
        let probs = normalized(&w);
        let beliefs: Vec<GaussianBelief> = (0..2)
            .map(|k| GaussianBelief::new(DVector::from_column_slice(&means[2 * k..2 * k + 2]), spd(&covs[4 * k..4 * k + 4], 2)).unwrap())
            .collect();
        let mixed = gray_collapse(&probs, &beliefs);
        let within = &beliefs[0].cov * probs[0] + &beliefs[1].cov * probs[1];
        prop_assert!(min_eigenvalue(&(&mixed.cov - within)) > -1e-12);
    }

    #[test]
    fn factor_moments_lie_between_state_and_level(
        kappa in 0.05f64..3.0,
        theta in 0.001f64..2.0,
        beta in 0.0f64..0.2,
        x in 0.0f64..3.0,
    ) {
        let p = GcirParams::new(kappa, theta, 1e-6, beta, Measure::Physical).unwrap();
        let (mean, var) = factor_moments(&p, x, 1.0 / 52.0);
        prop_assert!(var >= 0.0);
        prop_assert!(mean >= x.min(theta) - 1e-15 && mean <= x.max(theta) + 1e-15);
    }
}
