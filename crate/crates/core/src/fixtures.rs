//! Small reference models shared by tests, benchmarks, and the `validate`
//! command.

use nalgebra::{DMatrix, DVector};

use crate::affine::{GcirParams, Measure, RiskPrice};
use crate::pricing::{FactorSpec, ModelSpec, RatingModel};
use crate::ratings::{
    adjust_default_intensity, embed_generator, lando_decomposition, RatingGenerator, RatingMeasure, RatingTransition,
    WeightPolicy, COARSE_BUCKETS,
};
use crate::regimes::CtmcGenerator;

pub const WEEK: f64 = 1.0 / 52.0;

/// One-year risk-neutral coarse migration matrix (AAA, AA+, AA, AA-, SG, D),
/// rounded to four decimals.
#[rustfmt::skip]
pub const REFERENCE_PQ: [f64; 36] = [
    0.9978, 0.0,    0.0,    0.0,    0.0,    0.0022,
    0.0064, 0.9719, 0.0174, 0.0013, 0.0002, 0.0028,
    0.0,    0.0060, 0.9717, 0.0187, 0.0002, 0.0034,
    0.0,    0.0007, 0.0071, 0.9798, 0.0033, 0.0091,
    0.0,    0.0,    0.0064, 0.0208, 0.8935, 0.0792,
    0.0,    0.0,    0.0,    0.0,    0.0,    1.0,
];

/// Default-intensity adjustments for the reference matrix.
pub const REFERENCE_DELTA_NU: [f64; 5] = [0.000220, 5.36e-6, 0.000105, 0.000257, 0.016223];

pub fn reference_transition() -> RatingTransition {
    RatingTransition::from_rounded(
        DMatrix::from_row_slice(6, 6, &REFERENCE_PQ),
        RatingMeasure::RiskNeutral,
        COARSE_BUCKETS.iter().map(|s| s.to_string()).collect(),
    )
    .expect("reference matrix is valid")
}

/// Embedded reference generator with the intensity adjustment applied.
pub fn reference_generator() -> RatingGenerator {
    let g = embed_generator(&reference_transition()).expect("reference matrix embeds");
    adjust_default_intensity(&g, &REFERENCE_DELTA_NU).expect("adjustments are nonnegative")
}

pub fn rating_model(generator: RatingGenerator) -> RatingModel {
    let lando = lando_decomposition(&generator, WeightPolicy::Signed).expect("real spectrum");
    RatingModel { generator, lando }
}

/// Two non-default ratings with driver-scaled default intensities.
pub fn two_rating_generator() -> RatingGenerator {
    RatingGenerator::new(
        DMatrix::from_row_slice(2, 2, &[-0.3, 0.3, 0.1, -0.1]),
        DVector::from_vec(vec![0.5, 3.0]),
        vec!["A".into(), "B".into(), "D".into()],
    )
    .expect("valid generator")
}

fn factor(kappa: f64, theta: f64, alpha: f64, beta: f64, lambda: f64) -> FactorSpec {
    let p = GcirParams::new(kappa, theta, alpha, beta, Measure::Physical).expect("valid factor");
    FactorSpec::new(p, RiskPrice(lambda)).expect("admissible risk price")
}

/// Rate factors for a low (`L`) and a high (`H`) rate regime.
pub fn rate_factors_lh() -> Vec<[FactorSpec; 3]> {
    vec![
        [
            factor(0.6, 0.015, 2e-5, 0.002, -2.0),
            factor(0.08, 0.010, 1e-5, 0.001, -1.0),
            factor(1.0, 0.002, 1e-6, 0.001, -0.1),
        ],
        [
            factor(1.2, 0.030, 2e-5, 0.003, -2.0),
            factor(0.08, 0.012, 1e-5, 0.001, -1.0),
            factor(0.5, 0.004, 1e-6, 0.002, -0.1),
        ],
    ]
}

/// Two rate regimes, one credit regime, and the two-rating system.
pub fn toy_two_regime_model() -> ModelSpec {
    ModelSpec::new(
        rate_factors_lh(),
        vec![factor(0.5, 0.01, 0.0, 0.01, -0.5)],
        CtmcGenerator::two_state(0.5, 0.8, ["L", "H"]).expect("valid chain"),
        CtmcGenerator::single("E"),
        DMatrix::from_column_slice(2, 1, &[0.2, 0.5]),
        Some(rating_model(two_rating_generator())),
        WEEK,
    )
    .expect("consistent model")
}

/// Two rate and two credit regimes (`E` expansion, `C` contraction) on the
/// reference rating system. The credit driver is of order one, so the
/// one-year migration matrix applies at roughly its own intensity.
pub fn reference_model() -> ModelSpec {
    ModelSpec::new(
        rate_factors_lh(),
        vec![factor(0.5, 1.0, 1e-4, 0.05, -0.5), factor(0.4, 2.0, 1e-4, 0.08, -0.5)],
        CtmcGenerator::two_state(0.5, 0.8, ["L", "H"]).expect("valid chain"),
        CtmcGenerator::two_state(0.6, 1.0, ["E", "C"]).expect("valid chain"),
        DMatrix::from_row_slice(2, 2, &[2.0, 4.0, 1.0, 3.0]),
        Some(rating_model(reference_generator())),
        WEEK,
    )
    .expect("consistent model")
}
