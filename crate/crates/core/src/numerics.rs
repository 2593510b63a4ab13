//! Small numerical kernels: log-sum-exp, the gamma function, BFGS,
//! nonnegative least squares, and a damped fixed-point plus Newton solver.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{ModelError, Result};

/// `ln Σ exp(x)`, skipping `-inf` terms; `-inf` for an empty or all-`-inf` input.
pub fn log_sum_exp(xs: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    let s: f64 = xs.into_iter().map(|x| (x - m).exp()).sum();
    m + s.ln()
}

pub fn gamma(z: f64) -> f64 {
    statrs::function::gamma::gamma(z)
}

pub fn ln_gamma(z: f64) -> f64 {
    statrs::function::gamma::ln_gamma(z)
}

pub fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
}

/// Quasi-Newton minimization with an Armijo backtracking line search.
/// Returns the best iterate even when the gradient tolerance is not met.
pub fn bfgs(f: impl Fn(&[f64]) -> (f64, Vec<f64>), x0: &[f64], gtol: f64, max_iter: usize) -> Minimum {
    let n = x0.len();
    let mut x = DVector::from_column_slice(x0);
    let (mut fx, g0) = f(x.as_slice());
    let mut g = DVector::from_vec(g0);
    let mut hinv = DMatrix::<f64>::identity(n, n);
    let mut iterations = 0;
    while iterations < max_iter && g.amax() > gtol {
        iterations += 1;
        let mut dir = -(&hinv * &g);
        if dir.dot(&g) >= 0.0 {
            hinv = DMatrix::identity(n, n);
            dir = -g.clone();
        }
        let slope = dir.dot(&g);
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let xn = &x + step * &dir;
            let (fn_, gn) = f(xn.as_slice());
            if fn_.is_finite() && fn_ <= fx + 1e-4 * step * slope {
                accepted = Some((xn, fn_, DVector::from_vec(gn)));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fn_, gn)) = accepted else { break };
        let s = &xn - &x;
        let y = &gn - &g;
        let sy = s.dot(&y);
        if sy > 1e-300 {
            let rho = 1.0 / sy;
            let eye = DMatrix::<f64>::identity(n, n);
            let a = &eye - rho * &s * y.transpose();
            let b = &eye - rho * &y * s.transpose();
            hinv = &a * &hinv * &b + rho * &s * s.transpose();
        }
        x = xn;
        fx = fn_;
        g = gn;
    }
    Minimum { grad_norm: g.amax(), x: x.as_slice().to_vec(), value: fx, iterations }
}

/// Lawson–Hanson active-set solution of `min ||A x - b||` subject to `x ≥ 0`.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = a.ncols();
    let mut x = DVector::zeros(n);
    let mut passive = vec![false; n];
    let scale = a.amax().max(1e-300) * b.amax().max(1e-300);
    let tol = 1e-13 * scale * (a.nrows().max(n) as f64);
    for _ in 0..3 * n + 10 {
        let w = a.transpose() * (b - a * &x);
        let candidate = (0..n).filter(|j| !passive[*j] && w[*j] > tol).max_by(|p, q| w[*p].total_cmp(&w[*q]));
        let Some(j) = candidate else { break };
        passive[j] = true;
        loop {
            let idx: Vec<usize> = (0..n).filter(|k| passive[*k]).collect();
            let sub = a.select_columns(&idx);
            let z_sub = least_squares(&sub, b);
            if z_sub.iter().all(|v| *v > 0.0) {
                x.fill(0.0);
                for (k, v) in idx.iter().zip(z_sub.iter()) {
                    x[*k] = *v;
                }
                break;
            }
            // Step back toward the feasible region until a variable hits zero.
            let mut alpha = f64::INFINITY;
            for (k, z) in idx.iter().zip(z_sub.iter()) {
                if *z <= 0.0 {
                    alpha = alpha.min(x[*k] / (x[*k] - z));
                }
            }
            for (k, z) in idx.iter().zip(z_sub.iter()) {
                x[*k] += alpha * (z - x[*k]);
            }
            for k in idx {
                if x[k] <= 1e-15 * scale.sqrt() {
                    x[k] = 0.0;
                    passive[k] = false;
                }
            }
        }
    }
    x
}

/// Least squares through a column-pivot-free QR; falls back to SVD when
/// the triangular factor is singular.
pub fn least_squares(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    if a.nrows() >= a.ncols() {
        let qr = a.clone().qr();
        let qtb = qr.q().transpose() * b;
        if let Some(z) = qr.r().solve_upper_triangular(&qtb) {
            if z.iter().all(|v| v.is_finite()) {
                return z;
            }
        }
    }
    a.clone().svd(true, true).solve(b, 1e-14).unwrap_or_else(|_| DVector::zeros(a.ncols()))
}

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    pub tol: f64,
    pub damping: f64,
    pub max_fixed_point: usize,
    /// Switch to Newton once the residual falls below this.
    pub newton_switch: f64,
    pub max_newton: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tol: 1e-12, damping: 0.5, max_fixed_point: 100_000, newton_switch: 1e-3, max_newton: 60 }
    }
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
    pub trace: Vec<f64>,
}

/// Solves `F(x) = 0` where `x - F(x)` is a natural fixed-point update.
/// Damped iteration (step halving when the residual grows) brings the
/// iterate near the solution; Newton with a forward-difference Jacobian
/// finishes it.
pub fn solve_system<F>(what: &'static str, x0: &[f64], residual: F, opts: &SolverOptions) -> Result<SolveReport>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    let mut x = x0.to_vec();
    let mut r = residual(&x)?;
    let mut norm = max_abs(&r);
    let mut trace = vec![norm];
    let mut lambda = opts.damping;
    let mut iterations = 0;
    while norm > opts.newton_switch.max(opts.tol) && iterations < opts.max_fixed_point {
        iterations += 1;
        let trial: Vec<f64> = x.iter().zip(&r).map(|(a, b)| a - lambda * b).collect();
        match residual(&trial) {
            Ok(rt) if max_abs(&rt).is_finite() && max_abs(&rt) <= norm * (1.0 + 1e-12) => {
                x = trial;
                r = rt;
                norm = max_abs(&r);
                lambda = (lambda * 1.2).min(opts.damping);
            }
            _ => {
                lambda *= 0.5;
                if lambda < 1e-12 {
                    break;
                }
            }
        }
        trace.push(norm);
    }
    let mut stalls = 0;
    for _ in 0..opts.max_newton {
        if norm <= opts.tol {
            break;
        }
        iterations += 1;
        let jac = jacobian(&x, &r, &residual)?;
        let step = match jac.clone().lu().solve(&DVector::from_column_slice(&r)) {
            Some(s) if s.iter().all(|v| v.is_finite()) => s,
            _ => least_squares(&jac, &DVector::from_column_slice(&r)),
        };
        let mut t = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let trial: Vec<f64> = x.iter().zip(step.iter()).map(|(a, s)| a - t * s).collect();
            if let Ok(rt) = residual(&trial) {
                let nt = max_abs(&rt);
                if nt.is_finite() && nt < norm {
                    x = trial;
                    r = rt;
                    norm = nt;
                    improved = true;
                    break;
                }
            }
            t *= 0.5;
        }
        trace.push(norm);
        if !improved {
            stalls += 1;
            if stalls > 2 {
                break;
            }
        }
    }
    if norm <= opts.tol {
        Ok(SolveReport { x, iterations, residual: norm, trace })
    } else {
        Err(ModelError::Convergence { what, iterations, residual: norm, trace })
    }
}

fn jacobian<F>(x: &[f64], r0: &[f64], residual: &F) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    let n = x.len();
    let cols: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|j| {
            let h = 1e-7 * (1.0 + x[j].abs());
            let mut xp = x.to_vec();
            xp[j] += h;
            let rp = residual(&xp)?;
            Ok(rp.iter().zip(r0).map(|(a, b)| (a - b) / h).collect())
        })
        .collect::<Result<_>>()?;
    Ok(DMatrix::from_fn(r0.len(), n, |i, j| cols[j][i]))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Double-exponential (exp-sinh) quadrature of the Euler integral.
    fn gamma_quadrature(z: f64) -> f64 {
        let h = 1.0 / 256.0;
        let half_pi = std::f64::consts::FRAC_PI_2;
        let mut s = 0.0;
        let mut k = (-7.0 / h) as i64;
        while (k as f64) * h <= 4.5 {
            let u = k as f64 * h;
            let lt = half_pi * u.sinh();
            let t = lt.exp();
            // t^(z-1) e^(-t) dt with dt = t (π/2) cosh u du
            let v = (z * lt - t).exp() * half_pi * u.cosh();
            s += v;
            k += 1;
        }
        s * h
    }

    #[test]
    fn gamma_matches_quadrature() {
        let z: f64 = 1.0 - 5.88 / 21.4;
        assert!((z - 0.725_233_644_859_813).abs() < 1e-14);
        let g = gamma(z);
        let q = gamma_quadrature(z);
        assert!((g - q).abs() < 1e-10 * q, "{g} vs {q}");
        for z in [0.3, 0.5, 0.9, 1.0, 2.5] {
            assert!((gamma(z) - gamma_quadrature(z)).abs() < 1e-10 * gamma(z));
        }
    }

    #[test]
    fn lse_is_stable() {
        let v = log_sum_exp([1000.0, 1000.0]);
        assert!((v - 1000.0 - 2f64.ln()).abs() < 1e-12);
        assert_eq!(log_sum_exp([f64::NEG_INFINITY]), f64::NEG_INFINITY);
        assert!((log_sum_exp([f64::NEG_INFINITY, 0.0])).abs() < 1e-15);
    }

    #[test]
    fn bfgs_rosenbrock() {
        let f = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
            (v, g)
        };
        let m = bfgs(f, &[-1.2, 1.0], 1e-10, 500);
        assert!((m.x[0] - 1.0).abs() < 1e-8 && (m.x[1] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn nnls_clamps_negative_coordinate() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let b = DVector::from_vec(vec![2.0, -1.0, 1.0]);
        let x = nnls(&a, &b);
        // With x2 = 0: minimize (x1-2)^2 + (x1-1)^2 -> x1 = 1.5
        assert!((x[0] - 1.5).abs() < 1e-12 && x[1] == 0.0);
        let exact = nnls(&a, &DVector::from_vec(vec![0.3, 0.5, 0.8]));
        assert!((exact[0] - 0.3).abs() < 1e-14 && (exact[1] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn newton_finishes_fixed_point() {
        // x = cos(x) component-wise with a coupling term.
        let res = |x: &[f64]| Ok(vec![x[0] - (x[1]).cos(), x[1] - 0.5 * (x[0]).sin()]);
        let rep = solve_system("test", &[0.0, 0.0], res, &SolverOptions::default()).unwrap();
        assert!(rep.residual < 1e-12);
    }
}
