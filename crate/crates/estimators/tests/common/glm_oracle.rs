//! Dense Newton-Raphson Poisson GLM with explicit dummy columns.

use nalgebra::{DMatrix, DVector};

/// Builds `[covariates | intercept | dummies(levels 1..) per dimension]`.
pub fn dense_design(covs: &[Vec<f64>], fes: &[Vec<usize>]) -> DMatrix<f64> {
    let n = covs.first().map(|c| c.len()).or(fes.first().map(|f| f.len())).unwrap();
    let mut cols: Vec<Vec<f64>> = covs.to_vec();
    cols.push(vec![1.0; n]);
    for f in fes {
        let levels = f.iter().max().unwrap() + 1;
        for l in 1..levels {
            cols.push(f.iter().map(|g| if *g == l { 1.0 } else { 0.0 }).collect());
        }
    }
    DMatrix::from_fn(n, cols.len(), |i, j| cols[j][i])
}

fn loglik(x: &DMatrix<f64>, y: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let eta = x * b;
    eta.iter().zip(y.iter()).map(|(e, y)| y * e - e.exp()).sum()
}

pub fn poisson_newton(x: &DMatrix<f64>, y: &[f64]) -> DVector<f64> {
    let y = DVector::from_column_slice(y);
    let p = x.ncols();
    let mut b = DVector::zeros(p);
    let mean = y.mean();
    // Column of ones sits right after the covariates; find it.
    let icpt = (0..p).find(|j| x.column(*j).iter().all(|v| *v == 1.0)).unwrap();
    b[icpt] = mean.ln();
    for _ in 0..500 {
        let mu = (x * &b).map(f64::exp);
        let g = x.transpose() * (&y - &mu);
        let mut h = DMatrix::zeros(p, p);
        for i in 0..x.nrows() {
            let r = x.row(i);
            h += mu[i] * r.transpose() * r;
        }
        let step = h.lu().solve(&g).expect("nonsingular hessian");
        let base = loglik(x, &y, &b);
        let mut t = 1.0;
        let mut next = &b + &step * t;
        while loglik(x, &y, &next) < base - 1e-12 * base.abs() && t > 1e-8 {
            t *= 0.5;
            next = &b + &step * t;
        }
        let size = (&next - &b).amax();
        b = next;
        if size < 1e-14 {
            break;
        }
    }
    b
}

/// OLS on an explicit design via normal equations solved by QR.
pub fn ols_dense(x: &DMatrix<f64>, y: &[f64]) -> DVector<f64> {
    let qr = x.clone().qr();
    let qty = qr.q().transpose() * DVector::from_column_slice(y);
    qr.r().solve_upper_triangular(&qty).unwrap()
}
