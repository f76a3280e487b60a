//! In-sample pricing errors of filtered sovereign yields.

use rsgcir_core::panel::{CurvePanel, Series};
use rsgcir_core::pricing::ModelSpec;

use crate::blocks::{sovereign_measurements, RateFilterOutput};
use crate::ukf::Measurement;
use crate::FilterError;

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorStats {
    pub series: Series,
    /// Mean of observed minus fitted, in basis points.
    pub mean_bp: f64,
    pub sd_bp: f64,
    /// Root mean squared error relative to the mean observed yield.
    pub rrmse: f64,
    pub count: usize,
}

/// Sovereign yields implied by the filtered states, mixed over rate regimes
/// with the filtered probabilities. Returns the panel columns and
/// `[t][column]` fitted values.
pub fn fitted_sovereign_yields(
    panel: &CurvePanel,
    m: &ModelSpec,
    out: &RateFilterOutput,
) -> Result<(Vec<usize>, Vec<Vec<f64>>), FilterError> {
    let (columns, maps) = sovereign_measurements(panel, m)?;
    let fitted = out
        .summaries
        .iter()
        .map(|s| {
            let mut y = vec![0.0; columns.len()];
            for (r, (belief, p)) in s.states.iter().zip(&s.probs).enumerate() {
                let v = maps[r].observe(&belief.mean);
                for (acc, v) in y.iter_mut().zip(v.iter()) {
                    *acc += p * v;
                }
            }
            y
        })
        .collect();
    Ok((columns, fitted))
}

/// Error statistics per column over dates where the yield is observed.
pub fn pricing_error_stats(panel: &CurvePanel, columns: &[usize], fitted: &[Vec<f64>]) -> Vec<ErrorStats> {
    columns
        .iter()
        .enumerate()
        .map(|(i, &j)| {
            let pairs: Vec<(f64, f64)> =
                panel.values.iter().zip(fitted).filter_map(|(row, f)| row[j].map(|y| (y, y - f[i]))).collect();
            let n = pairs.len() as f64;
            let mean = pairs.iter().map(|p| p.1).sum::<f64>() / n;
            let var = pairs.iter().map(|p| (p.1 - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
            let rmse = (pairs.iter().map(|p| p.1 * p.1).sum::<f64>() / n).sqrt();
            let level = pairs.iter().map(|p| p.0).sum::<f64>() / n;
            ErrorStats {
                series: panel.series[j],
                mean_bp: 1e4 * mean,
                sd_bp: 1e4 * var.sqrt(),
                rrmse: rmse / level,
                count: pairs.len(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;
    use rsgcir_core::panel::Segment;

    #[test]
    fn hand_computed_statistics() {
        let panel = CurvePanel {
            dates: (1..=3).map(|d| NaiveDate::from_ymd_opt(2020, 1, d).unwrap()).collect(),
            series: vec![Series { segment: Segment::Cgb, maturity: 1.0 }],
            values: vec![vec![Some(0.03)], vec![None], vec![Some(0.01)]],
        };
        let s = &pricing_error_stats(&panel, &[0], &[vec![0.02], vec![0.5], vec![0.02]])[0];
        assert_eq!(s.count, 2);
        assert!(s.mean_bp.abs() < 1e-9);
        assert!((s.sd_bp - 1e4 * 0.02f64.sqrt() * 0.1).abs() < 1e-9);
        assert!((s.rrmse - 0.5).abs() < 1e-12);
    }
}
