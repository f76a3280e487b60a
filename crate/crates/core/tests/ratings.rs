use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rsgcir_core::linalg::expm;
use rsgcir_core::ratings::*;

fn coarse_labels() -> Vec<String> {
    COARSE_BUCKETS.iter().map(|s| s.to_string()).collect()
}

/// Published one-year risk-neutral matrix (rows sum to one up to rounding).
fn reference_pq() -> RatingTransition {
    #[rustfmt::skip]
    let p = DMatrix::from_row_slice(6, 6, &[
        0.9978, 0.0,    0.0,    0.0,    0.0,    0.0022,
        0.0064, 0.9719, 0.0174, 0.0013, 0.0002, 0.0028,
        0.0,    0.0060, 0.9717, 0.0187, 0.0002, 0.0034,
        0.0,    0.0007, 0.0071, 0.9798, 0.0033, 0.0091,
        0.0,    0.0,    0.0064, 0.0208, 0.8935, 0.0792,
        0.0,    0.0,    0.0,    0.0,    0.0,    1.0,
    ]);
    RatingTransition::from_rounded(p, RatingMeasure::RiskNeutral, coarse_labels()).unwrap()
}

const DELTA_NU: [f64; 5] = [0.000220, 5.36e-6, 0.000105, 0.000257, 0.016223];

#[test]
fn reference_rows_are_stochastic() {
    let pq = reference_pq();
    assert_eq!(pq.p.row(0).iter().copied().collect::<Vec<_>>(), vec![0.9978, 0.0, 0.0, 0.0, 0.0, 0.0022]);
    for i in 0..6 {
        assert!((pq.p.row(i).sum() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn embedding_recovers_a_hand_built_generator() {
    #[rustfmt::skip]
    let g = DMatrix::from_row_slice(4, 4, &[
        -0.12, 0.08, 0.03, 0.01,
         0.05, -0.20, 0.10, 0.05,
         0.01, 0.09, -0.25, 0.15,
         0.0,  0.0,  0.0,  0.0,
    ]);
    let pq =
        RatingTransition::new(expm(&g).unwrap(), RatingMeasure::RiskNeutral, (0..4).map(|i| i.to_string()).collect())
            .unwrap();
    let emb = embed_generator(&pq).unwrap();
    assert!((emb.full_generator() - &g).amax() < 1e-8);
    assert!(embedding_error(&emb, &pq).unwrap() < 1e-12);
}

#[test]
fn reference_embedding_is_a_conservative_generator() {
    let pq = reference_pq();
    let g = embed_generator(&pq).unwrap();
    let q = g.full_generator();
    for i in 0..6 {
        assert!(q.row(i).sum().abs() < 1e-14);
        for j in 0..6 {
            if i != j {
                assert!(q[(i, j)] >= 0.0);
            }
        }
    }
    assert!(q.row(5).amax() == 0.0);
    let err = embedding_error(&g, &pq).unwrap();
    assert!(err < 1e-2, "reconstruction error {err}");
}

#[test]
fn delta_nu_keeps_migration_rates_bit_identical() {
    let g = embed_generator(&reference_pq()).unwrap();
    let adj = adjust_default_intensity(&g, &DELTA_NU).unwrap();
    let (before, after) = (g.full_generator(), adj.full_generator());
    for i in 0..5 {
        for j in 0..5 {
            if i != j {
                assert_eq!(before[(i, j)].to_bits(), after[(i, j)].to_bits());
            }
        }
        assert!(after.row(i).sum().abs() < 1e-14);
        assert_eq!(after[(i, 5)], before[(i, 5)] + DELTA_NU[i]);
    }
}

#[test]
fn lando_identities_on_reference_generator() {
    let g = adjust_default_intensity(&embed_generator(&reference_pq()).unwrap(), &DELTA_NU).unwrap();
    let l = lando_decomposition(&g, WeightPolicy::Signed).unwrap();
    assert!(l.modes.iter().all(|d| *d < 0.0));
    for i in 0..5 {
        assert!((l.weights.row(i).sum() - 1.0).abs() < 1e-8);
    }
    assert!(l.absorbing_column_residual < 1e-10);
    assert!(l.reconstruction_error < 1e-8);
    let q = g.full_generator();
    for &t in &[0.25, 1.0, 5.0, 10.0, 30.0] {
        let p = expm(&(&q * t)).unwrap();
        for i in 0..5 {
            assert!((1.0 - p[(i, 5)] - l.survival(i, t)).abs() < 1e-8);
        }
    }
    // The published matrix produces signed mode weights.
    assert!(l.min_weight < -0.1);
    assert!(matches!(lando_decomposition(&g, WeightPolicy::NonNegative), Err(RatingError::NegativeWeight { .. })));
}

#[test]
fn two_rating_survival_matches_matrix_exponential() {
    let lambda = DMatrix::from_row_slice(2, 2, &[-0.3, 0.3, 0.1, -0.1]);
    let g = RatingGenerator::new(lambda, DVector::from_vec(vec![0.01, 0.2]), vec!["A".into(), "B".into(), "D".into()])
        .unwrap();
    let l = lando_decomposition(&g, WeightPolicy::Signed).unwrap();
    for &t in &[0.5, 1.0, 5.0] {
        let p = expm(&(g.full_generator() * t)).unwrap();
        for i in 0..2 {
            assert!((1.0 - p[(i, 2)] - l.survival(i, t)).abs() < 1e-10);
        }
    }
}

#[test]
fn calibration_round_trip() {
    let pp = reference_pq();
    let truth = [0.0031, 0.0042, 0.0055, 0.0120, 0.0700];
    let pq = risk_neutral_distortion(&pp, &truth).unwrap();
    let t_max = 5;
    let mut q = DMatrix::zeros(5, t_max);
    let mut power = pq.p.clone();
    for t in 0..t_max {
        if t > 0 {
            power = &power * &pq.p;
        }
        for i in 0..5 {
            q[(i, t)] = power[(i, 5)];
        }
    }
    let w = DMatrix::from_element(5, t_max, 1.0);
    let pi = calibrate_pi(&pp, &q, &w, t_max).unwrap();
    for (a, b) in pi.iter().zip(&truth) {
        assert!((a - b).abs() < 1e-4, "{a} vs {b}");
    }
    let start: Vec<f64> = pp.default_probs().iter().copied().collect();
    let f_start = calibration_objective(&pp, &start, &q, &w, t_max).unwrap();
    let f_end = calibration_objective(&pp, &pi, &q, &w, t_max).unwrap();
    assert!(f_end <= f_start);
}

proptest! {
    #[test]
    fn distortion_preserves_row_sums_and_proportions(
        raw in proptest::collection::vec(0.01f64..1.0, 12),
        pi in proptest::collection::vec(0.001f64..0.5, 3),
    ) {
        let mut p = DMatrix::zeros(4, 4);
        for i in 0..3 {
            for j in 0..4 {
                p[(i, j)] = raw[i * 4 + j];
            }
        }
        p[(3, 3)] = 1.0;
        let pp = RatingTransition::from_rounded(p, RatingMeasure::Physical, (0..4).map(|i| i.to_string()).collect()).unwrap();
        let pq = risk_neutral_distortion(&pp, &pi).unwrap();
        for i in 0..3 {
            prop_assert!((pq.p.row(i).sum() - 1.0).abs() < 1e-12);
            prop_assert!((pq.p[(i, 3)] - pi[i]).abs() < 1e-15);
            let ratio_p = pp.p[(i, 0)] / pp.p[(i, 1)];
            let ratio_q = pq.p[(i, 0)] / pq.p[(i, 1)];
            prop_assert!((ratio_p - ratio_q).abs() <= 1e-12 * ratio_p);
        }
    }
}
