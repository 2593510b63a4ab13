use proptest::prelude::*;
use shiftsim_estimators::{fit, Dataset, RegressionSpec};

fn panel(ys: &[f64], xs: &[f64], groups: usize) -> Dataset {
    let n = ys.len();
    let g: Vec<String> = (0..n).map(|i| format!("g{}", i % groups)).collect();
    let h: Vec<String> = (0..n).map(|i| format!("h{}", (i / groups) % 3)).collect();
    Dataset::new()
        .with_numeric("y", ys.to_vec())
        .unwrap()
        .with_numeric("x", xs.to_vec())
        .unwrap()
        .with_categorical("g", &g)
        .unwrap()
        .with_categorical("h", &h)
        .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn ppml_scores_vanish_within_every_absorbed_level(
        rows in prop::collection::vec((0.0f64..20.0, -1.0f64..1.0), 24..60),
    ) {
        let ys: Vec<f64> = rows.iter().map(|r| r.0.floor()).collect();
        let xs: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let d = panel(&ys, &xs, 4);
        let Ok(r) = fit(&d, &RegressionSpec::ppml("y").covariate("x").fe(&["g"]).fe(&["h"])) else {
            return Ok(());
        };
        for col in ["g", "h"] {
            let (codes, levels) = d.categorical(col).unwrap();
            let mut s = vec![0.0; levels.len()];
            let mut scale = vec![0.0f64; levels.len()];
            for ((c, y), m) in codes.iter().zip(&ys).zip(&r.fitted) {
                s[*c] += y - m;
                scale[*c] += y.abs();
            }
            for (a, b) in s.iter().zip(&scale) {
                prop_assert!(a.abs() <= 1e-8 * (1.0 + b));
            }
        }
        let score: f64 = ys.iter().zip(&r.fitted).zip(&xs).map(|((y, m), x)| (y - m) * x).sum();
        prop_assert!(score.abs() < 1e-8 * (1.0 + ys.iter().sum::<f64>()));
    }

    #[test]
    fn ols_residuals_orthogonal_to_regressors(
        rows in prop::collection::vec((-5.0f64..5.0, -1.0f64..1.0), 12..60),
    ) {
        let ys: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let xs: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let d = panel(&ys, &xs, 3);
        let r = fit(&d, &RegressionSpec::ols("y").covariate("x").fe(&["g"])).unwrap();
        let resid: Vec<f64> = ys.iter().zip(&r.fitted).map(|(y, f)| y - f).collect();
        if r.coef("x").is_some() {
            let dot: f64 = resid.iter().zip(&xs).map(|(e, x)| e * x).sum();
            prop_assert!(dot.abs() < 1e-8);
        }
        let (codes, levels) = d.categorical("g").unwrap();
        let mut s = vec![0.0; levels.len()];
        for (c, e) in codes.iter().zip(&resid) {
            s[*c] += e;
        }
        prop_assert!(s.iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn constant_shift_of_log_response_only_moves_fixed_effects(
        rows in prop::collection::vec((-5.0f64..5.0, -1.0f64..1.0), 12..40),
        shift in -10.0f64..10.0,
    ) {
        let ys: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let xs: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let shifted: Vec<f64> = ys.iter().map(|y| y + shift).collect();
        let spec = RegressionSpec::ols("y").covariate("x").fe(&["g"]);
        let a = fit(&panel(&ys, &xs, 3), &spec).unwrap();
        let b = fit(&panel(&shifted, &xs, 3), &spec).unwrap();
        if let (Some(ca), Some(cb)) = (a.coef("x"), b.coef("x")) {
            prop_assert!((ca - cb).abs() < 1e-8 * (1.0 + ca.abs()));
        }
    }
}
