//! Fixed-effect absorption by alternating weighted projections.

/// One categorical dimension: dense codes and the number of levels.
#[derive(Debug, Clone)]
pub struct Dim {
    pub codes: Vec<usize>,
    pub levels: usize,
}

#[derive(Debug, Clone, Default)]
pub struct Absorber {
    dims: Vec<Dim>,
}

/// Outcome of a projection sweep sequence.
#[derive(Debug, Clone)]
pub struct Projection {
    /// `v` minus its projection on the span of all dummies.
    pub residual: Vec<f64>,
    /// Accumulated group effects per dimension; their sum is the projection.
    pub effects: Vec<Vec<f64>>,
    pub sweeps: usize,
    pub converged: bool,
}

impl Absorber {
    pub fn new(dims: Vec<Dim>) -> Self {
        Self { dims }
    }

    pub fn is_empty(&self) -> bool {
        self.dims.is_empty()
    }

    pub fn dims(&self) -> &[Dim] {
        &self.dims
    }

    /// Weighted group means of `v` in dimension `d`.
    fn group_means(&self, d: usize, v: &[f64], w: &[f64]) -> Vec<f64> {
        let dim = &self.dims[d];
        let mut num = vec![0.0; dim.levels];
        let mut den = vec![0.0; dim.levels];
        for ((&g, &x), &wt) in dim.codes.iter().zip(v).zip(w) {
            num[g] += wt * x;
            den[g] += wt;
        }
        num.iter()
            .zip(&den)
            .map(|(n, d)| if *d > 0.0 { n / d } else { 0.0 })
            .collect()
    }

    /// Gauss-Seidel sweeps over dimensions until the largest group mean
    /// removed in a sweep falls below `tol * (1 + max|v|)`.
    pub fn project(&self, v: &[f64], w: &[f64], tol: f64, max_sweeps: usize) -> Projection {
        let mut residual = v.to_vec();
        let mut effects: Vec<Vec<f64>> = self.dims.iter().map(|d| vec![0.0; d.levels]).collect();
        if self.dims.is_empty() {
            return Projection { residual, effects, sweeps: 0, converged: true };
        }
        let scale = 1.0 + v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let mut sweeps = 0;
        let mut converged = false;
        while sweeps < max_sweeps {
            sweeps += 1;
            let mut largest = 0.0f64;
            for d in 0..self.dims.len() {
                let means = self.group_means(d, &residual, w);
                for (r, &g) in residual.iter_mut().zip(&self.dims[d].codes) {
                    *r -= means[g];
                }
                for (e, m) in effects[d].iter_mut().zip(&means) {
                    *e += m;
                    largest = largest.max(m.abs());
                }
            }
            // A single dimension is exact after one sweep.
            if self.dims.len() == 1 || largest <= tol * scale {
                converged = true;
                break;
            }
        }
        Projection { residual, effects, sweeps, converged }
    }

    pub fn demean(&self, v: &[f64], w: &[f64], tol: f64, max_sweeps: usize) -> Vec<f64> {
        self.project(v, w, tol, max_sweeps).residual
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_dimension_subtracts_group_means() {
        let a = Absorber::new(vec![Dim { codes: vec![0, 0, 1, 1], levels: 2 }]);
        let r = a.demean(&[1.0, 3.0, 10.0, 20.0], &[1.0; 4], 1e-12, 10);
        assert_eq!(r, vec![-1.0, 1.0, -5.0, 5.0]);
    }

    #[test]
    fn two_way_residual_is_orthogonal_to_dummies() {
        let rows: Vec<(usize, usize)> = (0..5).flat_map(|i| (0..4).map(move |j| (i, j))).collect();
        let a = Absorber::new(vec![
            Dim { codes: rows.iter().map(|r| r.0).collect(), levels: 5 },
            Dim { codes: rows.iter().map(|r| r.1).collect(), levels: 4 },
        ]);
        let v: Vec<f64> = rows.iter().map(|(i, j)| ((i * 7 + j * 3) % 5) as f64 + 0.1 * *i as f64).collect();
        let w: Vec<f64> = rows.iter().map(|(i, j)| 1.0 + (*i + 2 * *j) as f64 / 10.0).collect();
        let p = a.project(&v, &w, 1e-13, 10_000);
        assert!(p.converged);
        for d in a.dims() {
            let mut s = vec![0.0; d.levels];
            for ((g, r), wt) in d.codes.iter().zip(&p.residual).zip(&w) {
                s[*g] += wt * r;
            }
            assert!(s.iter().all(|x| x.abs() < 1e-10));
        }
        for (k, (x, r)) in v.iter().zip(&p.residual).enumerate() {
            let fitted: f64 = a.dims().iter().zip(&p.effects).map(|(d, e)| e[d.codes[k]]).sum();
            assert!((x - r - fitted).abs() < 1e-12);
        }
    }
}
