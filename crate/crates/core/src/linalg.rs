//! Dense matrix functions shared by the regime, rating, and filtering code.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not square ({0}x{1})")]
    NotSquare(usize, usize),
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("matrix is singular")]
    Singular,
    #[error("no real principal logarithm: eigenvalue {0:?} lies on the closed negative real axis")]
    NoRealLogarithm((f64, f64)),
    #[error("spectrum is not real: eigenvalue {re} + {im}i")]
    ComplexSpectrum { re: f64, im: f64 },
    #[error("eigenvalues are not distinct (gap {0:e})")]
    RepeatedEigenvalues(f64),
    #[error("square-root iteration did not converge")]
    NoConvergence,
}

fn check_square(a: &DMatrix<f64>) -> Result<usize, LinalgError> {
    if a.nrows() != a.ncols() {
        return Err(LinalgError::NotSquare(a.nrows(), a.ncols()));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(LinalgError::NonFinite);
    }
    Ok(a.nrows())
}

pub fn norm1(a: &DMatrix<f64>) -> f64 {
    a.column_iter().map(|c| c.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

pub fn kronecker(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

const PADE3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const PADE5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const PADE7: [f64; 8] = [17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0];
const PADE9: [f64; 10] =
    [17643225600.0, 8821612800.0, 2075673600.0, 302702400.0, 30270240.0, 2162160.0, 110880.0, 3960.0, 90.0, 1.0];
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
const THETA: [(f64, usize); 4] =
    [(1.495585217958292e-2, 3), (2.539398330063230e-1, 5), (9.504178996162932e-1, 7), (2.097847961257068, 9)];
const THETA13: f64 = 5.371920351148152;

/// Matrix exponential by Pade scaling and squaring (orders 3 to 13).
pub fn expm(a: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
    let n = check_square(a)?;
    let id = DMatrix::<f64>::identity(n, n);
    let norm = norm1(a);
    for &(theta, m) in &THETA {
        if norm <= theta {
            let c: &[f64] = match m {
                3 => &PADE3,
                5 => &PADE5,
                7 => &PADE7,
                _ => &PADE9,
            };
            return pade_low(a, c, &id);
        }
    }
    let s = if norm > THETA13 { (norm / THETA13).log2().ceil() as i32 } else { 0 };
    let scaled = a / 2f64.powi(s);
    let mut r = pade13(&scaled, &id)?;
    for _ in 0..s {
        r = &r * &r;
    }
    Ok(r)
}

fn pade_low(a: &DMatrix<f64>, c: &[f64], id: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
    let a2 = a * a;
    let mut even = id * c[0];
    let mut odd = id * c[1];
    let mut pow = id.clone();
    for k in 1..c.len() / 2 {
        pow = &pow * &a2;
        even += &pow * c[2 * k];
        odd += &pow * c[2 * k + 1];
    }
    let u = a * odd;
    solve_pade(&even, &u)
}

fn pade13(a: &DMatrix<f64>, id: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
    let b = &PADE13;
    let a2 = a * a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let inner_u = &a6 * b[13] + &a4 * b[11] + &a2 * b[9];
    let u = a * (&a6 * &inner_u + &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + id * b[1]);
    let inner_v = &a6 * b[12] + &a4 * b[10] + &a2 * b[8];
    let v = &a6 * &inner_v + &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + id * b[0];
    solve_pade(&v, &u)
}

fn solve_pade(v: &DMatrix<f64>, u: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
    let q = v - u;
    let p = v + u;
    q.lu().solve(&p).ok_or(LinalgError::Singular)
}

/// Gauss-Legendre nodes and weights on `[0, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 0 { 1.0 } else { p1 };
            let pm = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * pn - pm) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = 0.5 * (1.0 - x);
        weights[i] = 1.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

/// Composite Gauss-Legendre integral of `f` over `[0, upper]`.
pub fn integrate(f: impl Fn(f64) -> f64, upper: f64, panels: usize, order: usize) -> f64 {
    let (nodes, weights) = gauss_legendre(order);
    let h = upper / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let left = p as f64 * h;
        total += nodes.iter().zip(&weights).map(|(t, w)| w * f(left + t * h)).sum::<f64>() * h;
    }
    total
}

/// Principal square root by the Denman-Beavers iteration.
pub fn sqrtm(a: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
    let n = check_square(a)?;
    let mut y = a.clone();
    let mut z = DMatrix::<f64>::identity(n, n);
    for _ in 0..100 {
        let y_inv = y.clone().try_inverse().ok_or(LinalgError::Singular)?;
        let z_inv = z.clone().try_inverse().ok_or(LinalgError::Singular)?;
        let y_next = (&y + z_inv) * 0.5;
        let z_next = (&z + y_inv) * 0.5;
        let change = norm1(&(&y_next - &y));
        y = y_next;
        z = z_next;
        if change <= 1e-15 * norm1(&y).max(1.0) {
            return Ok(y);
        }
    }
    Err(LinalgError::NoConvergence)
}

/// Principal matrix logarithm by inverse scaling and squaring.
///
/// Square roots are taken until `||A - I||_1 <= 0.25`, after which
/// `log(I + X)` is evaluated with the Gauss-Legendre partial-fraction form
/// of its diagonal Pade approximant.
pub fn logm(a: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
    let n = check_square(a)?;
    for ev in a.complex_eigenvalues().iter() {
        let scale = ev.norm().max(1e-300);
        if ev.re <= 0.0 && ev.im.abs() <= 1e-12 * scale.max(1.0) {
            return Err(LinalgError::NoRealLogarithm((ev.re, ev.im)));
        }
    }
    let id = DMatrix::<f64>::identity(n, n);
    let mut r = a.clone();
    let mut squarings = 0;
    while norm1(&(&r - &id)) > 0.25 {
        r = sqrtm(&r)?;
        squarings += 1;
        if squarings > 64 {
            return Err(LinalgError::NoConvergence);
        }
    }
    let x = &r - &id;
    let (nodes, weights) = gauss_legendre(12);
    let mut log = DMatrix::<f64>::zeros(n, n);
    for (t, w) in nodes.iter().zip(&weights) {
        let m = &id + &x * *t;
        let term = m.lu().solve(&x).ok_or(LinalgError::Singular)?;
        log += term * *w;
    }
    Ok(log * 2f64.powi(squarings))
}

/// Eigen-decomposition of a matrix with a real, distinct spectrum.
#[derive(Debug, Clone)]
pub struct RealEigen {
    /// Eigenvalues sorted in decreasing order.
    pub values: DVector<f64>,
    /// Right eigenvectors as columns, unit Euclidean norm.
    pub vectors: DMatrix<f64>,
    pub inverse: DMatrix<f64>,
}

pub fn real_eigen(a: &DMatrix<f64>) -> Result<RealEigen, LinalgError> {
    let n = check_square(a)?;
    let scale = norm1(a).max(1e-300);
    let mut values: Vec<f64> = Vec::with_capacity(n);
    for ev in a.complex_eigenvalues().iter() {
        if ev.im.abs() > 1e-10 * scale {
            return Err(LinalgError::ComplexSpectrum { re: ev.re, im: ev.im });
        }
        values.push(ev.re);
    }
    values.sort_by(|x, y| y.total_cmp(x));
    let min_gap = values.windows(2).map(|w| w[0] - w[1]).fold(f64::INFINITY, f64::min);
    if n > 1 && min_gap <= 1e-10 * scale {
        return Err(LinalgError::RepeatedEigenvalues(min_gap));
    }
    let mut vectors = DMatrix::<f64>::zeros(n, n);
    for (j, &d) in values.iter().enumerate() {
        let shifted = a - DMatrix::<f64>::identity(n, n) * d;
        let svd = shifted.svd(false, true);
        let v_t = svd.v_t.ok_or(LinalgError::NoConvergence)?;
        let k = svd.singular_values.imin();
        let mut v: DVector<f64> = v_t.row(k).transpose();
        let lead = v.iamax();
        if v[lead] < 0.0 {
            v = -v;
        }
        vectors.set_column(j, &v.normalize());
    }
    let inverse = vectors.clone().try_inverse().ok_or(LinalgError::Singular)?;
    Ok(RealEigen { values: DVector::from_vec(values), vectors, inverse })
}

/// Moore-Penrose pseudo-inverse of a symmetric matrix via its eigensystem.
pub fn pinv_symmetric(a: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let eig = symmetrize(a).symmetric_eigen();
    let cutoff = rel_tol * eig.eigenvalues.amax().max(1e-300);
    let inv_vals = eig.eigenvalues.map(|v| if v.abs() > cutoff { 1.0 / v } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&inv_vals) * eig.eigenvectors.transpose()
}

/// Symmetric square root factor `L` with `L L^T = A` for a positive
/// semidefinite `A`, flooring tiny negative eigenvalues at zero.
pub fn psd_factor(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrize(a).symmetric_eigen();
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_abs(a: &DMatrix<f64>) -> f64 {
        a.amax()
    }

    #[test]
    fn expm_of_diagonal_and_nilpotent() {
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![-3.0, 0.5, 12.0]));
        let e = expm(&d).unwrap();
        for (i, v) in [-3.0f64, 0.5, 12.0].iter().enumerate() {
            assert!((e[(i, i)] - v.exp()).abs() <= 1e-13 * v.exp());
        }
        let n = DMatrix::from_row_slice(2, 2, &[0.0, 2.0, 0.0, 0.0]);
        let e = expm(&n).unwrap();
        assert!(max_abs(&(e - DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]))) < 1e-15);
    }

    #[test]
    fn expm_of_two_state_generator_matches_closed_form() {
        let (a, b) = (0.7, 0.3);
        let q = DMatrix::from_row_slice(2, 2, &[-a, a, b, -b]);
        for &t in &[0.01, 1.0, 25.0] {
            let p = expm(&(&q * t)).unwrap();
            let decay = (-(a + b) * t).exp();
            let p00 = b / (a + b) + a / (a + b) * decay;
            assert!((p[(0, 0)] - p00).abs() < 1e-14);
        }
    }

    #[test]
    fn logm_inverts_expm() {
        let g = DMatrix::from_row_slice(3, 3, &[-0.3, 0.2, 0.1, 0.05, -0.15, 0.1, 0.0, 0.0, 0.0]);
        let l = logm(&expm(&g).unwrap()).unwrap();
        assert!(max_abs(&(l - g)) < 1e-13);
    }

    #[test]
    fn logm_rejects_negative_eigenvalue() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        assert!(matches!(logm(&a), Err(LinalgError::NoRealLogarithm(_))));
    }

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        let (x, w) = gauss_legendre(5);
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(9)).sum();
        assert!((s - 0.1).abs() < 1e-15);
        assert!((integrate(|u| u.exp(), 2.0, 3, 10) - 2f64.exp_m1()).abs() < 1e-14);
    }

    #[test]
    fn real_eigen_reconstructs() {
        let a = DMatrix::from_row_slice(3, 3, &[-0.5, 0.3, 0.1, 0.2, -0.4, 0.1, 0.0, 0.05, -0.2]);
        let e = real_eigen(&a).unwrap();
        let rec = &e.vectors * DMatrix::from_diagonal(&e.values) * &e.inverse;
        assert!(max_abs(&(rec - &a)) < 1e-13);
        assert!(e.values[0] > e.values[1] && e.values[1] > e.values[2]);
    }

    #[test]
    fn real_eigen_rejects_rotation() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        assert!(matches!(real_eigen(&a), Err(LinalgError::ComplexSpectrum { .. })));
    }

    #[test]
    fn pinv_of_singular_matrix() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let p = pinv_symmetric(&a, 1e-12);
        assert!(max_abs(&(&a * &p * &a - &a)) < 1e-14);
    }
}
