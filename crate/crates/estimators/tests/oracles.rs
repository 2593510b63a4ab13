mod common;

use common::glm_oracle::{dense_design, ols_dense, poisson_newton};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use shiftsim_estimators::{fit, Dataset, RegressionSpec, INTERCEPT};

struct Design {
    data: Dataset,
    covs: Vec<Vec<f64>>,
    fes: Vec<Vec<usize>>,
    truth: Vec<f64>,
}

fn poisson_design(seed: u64, n: usize, truth: &[f64], fe_sizes: &[usize]) -> Design {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let covs: Vec<Vec<f64>> = truth.iter().map(|_| (0..n).map(|_| normal.sample(&mut rng)).collect()).collect();
    let fes: Vec<Vec<usize>> = fe_sizes.iter().map(|k| (0..n).map(|_| rng.random_range(0..*k)).collect()).collect();
    let effects: Vec<Vec<f64>> = fe_sizes.iter().map(|k| (0..*k).map(|_| 0.5 * normal.sample(&mut rng)).collect()).collect();
    let y: Vec<f64> = (0..n)
        .map(|i| {
            let mut eta = 1.0;
            for (b, x) in truth.iter().zip(&covs) {
                eta += b * x[i] * 0.3;
            }
            for (f, e) in fes.iter().zip(&effects) {
                eta += e[f[i]];
            }
            Poisson::new(eta.exp()).unwrap().sample(&mut rng)
        })
        .collect();
    let mut data = Dataset::new().with_numeric("y", y).unwrap();
    for (j, x) in covs.iter().enumerate() {
        let scaled: Vec<f64> = x.iter().map(|v| v * 0.3).collect();
        data.add_numeric(&format!("x{j}"), scaled).unwrap();
    }
    for (d, f) in fes.iter().enumerate() {
        let labels: Vec<String> = f.iter().map(|g| format!("g{g}")).collect();
        data.add_categorical(&format!("fe{d}"), &labels).unwrap();
    }
    let covs = covs.iter().map(|x| x.iter().map(|v| v * 0.3).collect()).collect();
    Design { data, covs, fes, truth: truth.to_vec() }
}

/// Dense design columns must follow the dataset's first-appearance level order
/// only up to relabelling; the oracle uses raw codes, which spans the same space.
fn check_ppml_against_oracle(d: &Design) {
    let mut spec = RegressionSpec::ppml("y");
    for j in 0..d.covs.len() {
        spec = spec.covariate(&format!("x{j}"));
    }
    for k in 0..d.fes.len() {
        spec = spec.fe(&[&format!("fe{k}")]);
    }
    let spec = spec.cluster("fe0");
    let ours = fit(&d.data, &spec).unwrap();
    let x = dense_design(&d.covs, &d.fes);
    let y = d.data.numeric("y").unwrap();
    let oracle = poisson_newton(&x, y);
    for j in 0..d.covs.len() {
        let name = format!("x{j}");
        let a = ours.coef(&name).unwrap();
        assert!((a - oracle[j]).abs() < 1e-8, "{name}: {a} vs oracle {}", oracle[j]);
        let se = ours.se(&name).unwrap();
        assert!((a - d.truth[j]).abs() < 3.0 * se, "{name}: {a} not within 3 SE ({se}) of {}", d.truth[j]);
    }
    // Fitted means agree with the oracle's.
    let mu = (&x * &oracle).map(f64::exp);
    for (f, m) in ours.fitted.iter().zip(mu.iter()) {
        assert!((f - m).abs() <= 1e-7 * m.max(1.0));
    }
}

#[test]
fn ppml_two_covariates_two_fixed_effects_n2000() {
    check_ppml_against_oracle(&poisson_design(11, 2000, &[0.8, -1.2], &[25, 15]));
}

#[test]
fn ppml_one_covariate_one_fixed_effect() {
    check_ppml_against_oracle(&poisson_design(12, 800, &[1.5], &[30]));
}

#[test]
fn ppml_three_covariates_three_fixed_effects() {
    check_ppml_against_oracle(&poisson_design(13, 1500, &[0.4, -0.7, 1.1], &[10, 12, 8]));
}

#[test]
fn ppml_without_fixed_effects_matches_oracle_intercept() {
    let d = poisson_design(14, 600, &[0.9, -0.3], &[]);
    let ours = fit(&d.data, &RegressionSpec::ppml("y").covariates(&["x0", "x1"])).unwrap();
    let x = dense_design(&d.covs, &[]);
    let oracle = poisson_newton(&x, d.data.numeric("y").unwrap());
    assert!((ours.coef(INTERCEPT).unwrap() - oracle[2]).abs() < 1e-8);
    assert!((ours.coef("x0").unwrap() - oracle[0]).abs() < 1e-8);
}

#[test]
fn ols_with_one_fixed_effect_equals_explicit_demeaning() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 300;
    let g: Vec<usize> = (0..n).map(|_| rng.random_range(0..12)).collect();
    let x1: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let x2: Vec<f64> = (0..n).map(|i| rng.random::<f64>() + g[i] as f64 * 0.1).collect();
    let y: Vec<f64> = (0..n).map(|i| 2.0 * x1[i] - x2[i] + g[i] as f64 + rng.random::<f64>()).collect();
    let labels: Vec<String> = g.iter().map(|v| v.to_string()).collect();
    let data = Dataset::new()
        .with_numeric("y", y.clone())
        .unwrap()
        .with_numeric("x1", x1.clone())
        .unwrap()
        .with_numeric("x2", x2.clone())
        .unwrap()
        .with_categorical("g", &labels)
        .unwrap();
    let ours = fit(&data, &RegressionSpec::ols("y").covariates(&["x1", "x2"]).fe(&["g"])).unwrap();

    // Oracle: subtract group means by hand, then plain OLS without intercept.
    let demean = |v: &[f64]| -> Vec<f64> {
        let mut sum = [0.0; 12];
        let mut cnt = [0.0; 12];
        for (gi, x) in g.iter().zip(v) {
            sum[*gi] += x;
            cnt[*gi] += 1.0;
        }
        v.iter().zip(&g).map(|(x, gi)| x - sum[*gi] / cnt[*gi]).collect()
    };
    let (yd, a, b) = (demean(&y), demean(&x1), demean(&x2));
    let x = nalgebra::DMatrix::from_fn(n, 2, |i, j| if j == 0 { a[i] } else { b[i] });
    let beta = ols_dense(&x, &yd);
    assert!((ours.coef("x1").unwrap() - beta[0]).abs() < 1e-10);
    assert!((ours.coef("x2").unwrap() - beta[1]).abs() < 1e-10);
}
