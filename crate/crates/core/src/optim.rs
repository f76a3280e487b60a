//! Derivative-free minimizers: Nelder-Mead and a coordinate-wise parabolic
//! polish. Both treat non-finite objective values as `+inf`.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NelderMeadConfig {
    pub max_evals: usize,
    /// Absolute spread tolerance on simplex function values.
    pub f_tol: f64,
    /// Max-norm tolerance on simplex vertex offsets from the best vertex.
    pub x_tol: f64,
    /// Edge length of the initial simplex along each axis.
    pub initial_step: f64,
}

impl Default for NelderMeadConfig {
    fn default() -> Self {
        Self { max_evals: 20_000, f_tol: 1e-12, x_tol: 1e-10, initial_step: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    pub converged: bool,
}

fn finite_or_inf(v: f64) -> f64 {
    if v.is_finite() {
        v
    } else {
        f64::INFINITY
    }
}

/// Nelder-Mead with the dimension-adaptive coefficients of Gao and Han for
/// three or more parameters and the classical ones otherwise.
pub fn nelder_mead(f: impl Fn(&[f64]) -> f64, x0: &[f64], cfg: &NelderMeadConfig) -> Minimum {
    let n = x0.len();
    let eval = |x: &[f64]| finite_or_inf(f(x));
    if n == 0 {
        return Minimum { x: vec![], f: eval(x0), evals: 1, converged: true };
    }
    let nf = n as f64;
    let (reflect, expand, contract, shrink) =
        if n > 2 { (1.0, 1.0 + 2.0 / nf, 0.75 - 0.5 / nf, 1.0 - 1.0 / nf) } else { (1.0, 2.0, 0.5, 0.5) };
    let mut simplex: Vec<Vec<f64>> = vec![x0.to_vec()];
    for i in 0..n {
        let mut v = x0.to_vec();
        v[i] += if v[i].abs() > 1.0 { cfg.initial_step * v[i].abs() } else { cfg.initial_step };
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| eval(v)).collect();
    let mut evals = n + 1;
    let mut converged = false;
    while evals < cfg.max_evals {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();

        let spread = values[n] - values[0];
        let extent =
            simplex[1..].iter().flat_map(|v| v.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs())).fold(0.0, f64::max);
        if spread.is_finite() && spread <= cfg.f_tol && extent <= cfg.x_tol {
            converged = true;
            break;
        }

        let centroid: Vec<f64> = (0..n).map(|j| simplex[..n].iter().map(|v| v[j]).sum::<f64>() / nf).collect();
        let towards =
            |coef: f64| -> Vec<f64> { centroid.iter().zip(&simplex[n]).map(|(c, w)| c + coef * (c - w)).collect() };
        let xr = towards(reflect);
        let fr = eval(&xr);
        evals += 1;
        if fr < values[0] {
            let xe = towards(reflect * expand);
            let fe = eval(&xe);
            evals += 1;
            if fe < fr {
                simplex[n] = xe;
                values[n] = fe;
            } else {
                simplex[n] = xr;
                values[n] = fr;
            }
            continue;
        }
        if fr < values[n - 1] {
            simplex[n] = xr;
            values[n] = fr;
            continue;
        }
        let (xc, fc) = if fr < values[n] {
            let xc = towards(reflect * contract);
            let fc = eval(&xc);
            (xc, fc)
        } else {
            let xc = towards(-contract);
            let fc = eval(&xc);
            (xc, fc)
        };
        evals += 1;
        if fc < values[n].min(fr) {
            simplex[n] = xc;
            values[n] = fc;
            continue;
        }
        let best = simplex[0].clone();
        for i in 1..=n {
            for j in 0..n {
                simplex[i][j] = best[j] + shrink * (simplex[i][j] - best[j]);
            }
            values[i] = eval(&simplex[i]);
        }
        evals += n;
    }
    let best = (0..=n).min_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap_or(0);
    Minimum { x: simplex[best].clone(), f: values[best], evals, converged }
}

/// Sweeps each coordinate, fitting a parabola through `x - h`, `x`, `x + h`
/// and moving to its vertex when that lowers the objective. Never returns a
/// point worse than the start.
pub fn coordinate_polish(f: impl Fn(&[f64]) -> f64, x0: &[f64], f0: f64, rel_step: f64, sweeps: usize) -> Minimum {
    let eval = |x: &[f64]| finite_or_inf(f(x));
    let mut x = x0.to_vec();
    let mut fx = finite_or_inf(f0);
    let mut evals = 0;
    for sweep in 0..sweeps {
        let scale = 0.5f64.powi(sweep as i32);
        for i in 0..x.len() {
            let h = rel_step * scale * x[i].abs().max(1.0);
            let mut probe = x.clone();
            probe[i] = x[i] - h;
            let fm = eval(&probe);
            probe[i] = x[i] + h;
            let fp = eval(&probe);
            evals += 2;
            let curvature = fp - 2.0 * fx + fm;
            let mut cands: Vec<(f64, f64)> = vec![(x[i] - h, fm), (x[i] + h, fp)];
            if curvature > 0.0 {
                let t = x[i] - 0.5 * h * (fp - fm) / curvature;
                probe[i] = t;
                cands.push((t, eval(&probe)));
                evals += 1;
            }
            for (t, ft) in cands {
                if ft < fx {
                    x[i] = t;
                    fx = ft;
                }
            }
        }
    }
    Minimum { x, f: fx, evals, converged: true }
}
