//! Finite-difference sandwich covariances `H^-1 J H^-T` from per-date
//! log-likelihood contributions, for one stage and for the two stages
//! jointly.

use nalgebra::{DMatrix, DVector};

use super::{floor_psd, EstimationError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SandwichConfig {
    /// Relative central-difference step for per-date scores.
    pub score_step: f64,
    /// Relative step for second differences of the total log-likelihood.
    pub hessian_step: f64,
}

impl Default for SandwichConfig {
    fn default() -> Self {
        Self { score_step: 1e-5, hessian_step: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sandwich {
    pub cov: DMatrix<f64>,
    pub hessian: DMatrix<f64>,
    /// Sum of score outer products.
    pub outer: DMatrix<f64>,
    /// Set when the Hessian had to be pseudo-inverted.
    pub singular: bool,
}

fn step(z: f64, rel: f64) -> f64 {
    rel * z.abs().max(1e-2)
}

fn shifted(z: &[f64], moves: &[(usize, f64)]) -> Vec<f64> {
    let mut v = z.to_vec();
    for &(i, h) in moves {
        v[i] += h;
    }
    v
}

/// Per-date central-difference scores, `[date][param]`.
fn scores<F>(f: &F, z: &[f64], rel: f64) -> Result<DMatrix<f64>, EstimationError>
where
    F: Fn(&[f64]) -> Result<Vec<f64>, EstimationError>,
{
    let mut cols = Vec::with_capacity(z.len());
    for i in 0..z.len() {
        let h = step(z[i], rel);
        let up = f(&shifted(z, &[(i, h)]))?;
        let down = f(&shifted(z, &[(i, -h)]))?;
        cols.push(DVector::from_iterator(up.len(), up.iter().zip(&down).map(|(u, d)| (u - d) / (2.0 * h))));
    }
    if cols.is_empty() {
        return Ok(DMatrix::zeros(f(z)?.len(), 0));
    }
    Ok(DMatrix::from_columns(&cols))
}

fn total<F>(f: &F, z: &[f64]) -> Result<f64, EstimationError>
where
    F: Fn(&[f64]) -> Result<Vec<f64>, EstimationError>,
{
    let v: f64 = f(z)?.iter().sum();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(EstimationError::NonFiniteLikelihood)
    }
}

/// Second differences of `sum f` over coordinates `rows` x `cols` of `z`.
/// Diagonal entries of a square block use the three-point rule.
fn hessian_block<F>(f: &F, z: &[f64], rows: &[usize], cols: &[usize], rel: f64) -> Result<DMatrix<f64>, EstimationError>
where
    F: Fn(&[f64]) -> Result<Vec<f64>, EstimationError>,
{
    let centre = total(f, z)?;
    let mut h = DMatrix::zeros(rows.len(), cols.len());
    for (a, &i) in rows.iter().enumerate() {
        for (b, &j) in cols.iter().enumerate() {
            let (hi, hj) = (step(z[i], rel), step(z[j], rel));
            if i == j {
                let up = total(f, &shifted(z, &[(i, hi)]))?;
                let down = total(f, &shifted(z, &[(i, -hi)]))?;
                h[(a, b)] = (up - 2.0 * centre + down) / (hi * hi);
            } else if rows == cols && b < a {
                h[(a, b)] = h[(b, a)];
            } else {
                let pp = total(f, &shifted(z, &[(i, hi), (j, hj)]))?;
                let pm = total(f, &shifted(z, &[(i, hi), (j, -hj)]))?;
                let mp = total(f, &shifted(z, &[(i, -hi), (j, hj)]))?;
                let mm = total(f, &shifted(z, &[(i, -hi), (j, -hj)]))?;
                h[(a, b)] = (pp - pm - mp + mm) / (4.0 * hi * hj);
            }
        }
    }
    Ok(h)
}

fn assemble(hessian: DMatrix<f64>, outer: DMatrix<f64>) -> Sandwich {
    let (inv, singular) = match hessian.clone().try_inverse() {
        Some(inv) if inv.iter().all(|v| v.is_finite()) => (inv, false),
        _ => {
            log::warn!("Hessian is singular; using its pseudo-inverse");
            (
                hessian
                    .clone()
                    .pseudo_inverse(1e-12)
                    .unwrap_or_else(|_| DMatrix::zeros(hessian.nrows(), hessian.ncols())),
                true,
            )
        }
    };
    let cov = floor_psd(&(&inv * &outer * inv.transpose()));
    Sandwich { cov, hessian, outer, singular }
}

/// Sandwich covariance of the maximizer of `sum_t f(z)_t`.
pub fn sandwich_cov<F>(f: F, z: &[f64], cfg: &SandwichConfig) -> Result<Sandwich, EstimationError>
where
    F: Fn(&[f64]) -> Result<Vec<f64>, EstimationError>,
{
    let g = scores(&f, z, cfg.score_step)?;
    let idx: Vec<usize> = (0..z.len()).collect();
    let h = hessian_block(&f, z, &idx, &idx, cfg.hessian_step)?;
    Ok(assemble(h, g.transpose() * &g))
}

/// Joint sandwich for a two-step estimator. `first(z1)` gives the first
/// stage's contributions; `second(z1, z2)` gives the second stage's,
/// recomputing everything that depends on `z1`. The Hessian is block lower
/// triangular with the cross block taken from `second`, so the second
/// stage's block of the result carries the first stage's estimation error.
pub fn two_stage_sandwich<F1, F2>(
    first: F1,
    second: F2,
    z1: &[f64],
    z2: &[f64],
    cfg: &SandwichConfig,
) -> Result<Sandwich, EstimationError>
where
    F1: Fn(&[f64]) -> Result<Vec<f64>, EstimationError>,
    F2: Fn(&[f64], &[f64]) -> Result<Vec<f64>, EstimationError>,
{
    let (n1, n2) = (z1.len(), z2.len());
    let g1 = scores(&first, z1, cfg.score_step)?;
    let g2 = scores(&|z: &[f64]| second(z1, z), z2, cfg.score_step)?;
    if g1.nrows() != g2.nrows() {
        return Err(EstimationError::InvalidConfig("stages cover different dates".into()));
    }
    let mut g = DMatrix::zeros(g1.nrows(), n1 + n2);
    g.view_mut((0, 0), (g1.nrows(), n1)).copy_from(&g1);
    g.view_mut((0, n1), (g1.nrows(), n2)).copy_from(&g2);

    let idx1: Vec<usize> = (0..n1).collect();
    let idx2: Vec<usize> = (n1..n1 + n2).collect();
    let joint = [z1, z2].concat();
    let second_joint = |z: &[f64]| second(&z[..n1], &z[n1..]);
    let mut h = DMatrix::zeros(n1 + n2, n1 + n2);
    h.view_mut((0, 0), (n1, n1)).copy_from(&hessian_block(&first, z1, &idx1, &idx1, cfg.hessian_step)?);
    h.view_mut((n1, n1), (n2, n2)).copy_from(&hessian_block(&second_joint, &joint, &idx2, &idx2, cfg.hessian_step)?);
    h.view_mut((n1, 0), (n2, n1)).copy_from(&hessian_block(&second_joint, &joint, &idx2, &idx1, cfg.hessian_step)?);
    Ok(assemble(h, g.transpose() * &g))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_is_symmetric() {
        let ys = [0.3, -0.1, 0.8, 0.4, -0.6, 0.2];
        let f = |z: &[f64]| -> Result<Vec<f64>, EstimationError> {
            Ok(ys.iter().enumerate().map(|(t, y)| -0.5 * (y - z[0] - z[1] * t as f64).powi(2)).collect())
        };
        let s = sandwich_cov(f, &[0.1, 0.05], &SandwichConfig::default()).unwrap();
        assert_eq!(s.cov, s.cov.transpose());
    }
}
