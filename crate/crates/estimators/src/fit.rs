//! OLS and PPML with absorbed fixed effects.
//!
//! PPML runs iteratively reweighted least squares; each step absorbs the
//! fixed effects from the working response and covariates with weights
//! equal to the current conditional mean. Standard errors are
//! cluster-robust: CR1 for OLS (`G/(G-1) * (n-1)/(n-k)`), `G/(G-1)` for
//! PPML. Without a cluster column every observation is its own cluster.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::absorb::{Absorber, Dim};
use crate::dataset::Dataset;
use crate::error::{EstimationError, Result};
use crate::spec::{group_codes, group_labels, Family, RegressionSpec, INTERCEPT};

#[derive(Debug, Clone, Serialize)]
pub struct FeEstimates {
    pub name: String,
    pub columns: Vec<String>,
    pub levels: Vec<String>,
    /// Separated levels (all-zero response under PPML) carry `-inf`.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitResult {
    pub family: Family,
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub vcov: Vec<Vec<f64>>,
    /// OLS: R² against the weighted mean. PPML: 1 - deviance / null deviance.
    pub r2: f64,
    pub fitted: Vec<f64>,
    pub iterations: usize,
    pub deviance: Option<f64>,
    pub deviance_change: f64,
    pub dropped_covariates: Vec<String>,
    pub dropped_rows: Vec<usize>,
    pub fixed_effects: Vec<FeEstimates>,
    pub n_obs: usize,
    pub n_clusters: usize,
    pub warnings: Vec<String>,
}

impl FitResult {
    pub fn coef(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|k| self.coefficients[k])
    }

    pub fn se(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|k| self.std_errors[k])
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("fit result serializes")
    }

    /// Linear predictor (OLS) or conditional mean (PPML) for every row of
    /// `data`, with the named covariates and fixed-effect dimensions set to
    /// zero.
    pub fn predict(&self, data: &Dataset, zero_terms: &[&str]) -> Result<Vec<f64>> {
        let known = |t: &&str| {
            self.names.iter().any(|n| n == t)
                || self.dropped_covariates.iter().any(|n| n == t)
                || self.fixed_effects.iter().any(|f| f.name == *t)
        };
        if let Some(t) = zero_terms.iter().find(|t| !known(t)) {
            return Err(EstimationError::UnknownTerm(t.to_string()));
        }
        let n = data.nrows();
        let mut eta = vec![0.0; n];
        for (name, b) in self.names.iter().zip(&self.coefficients) {
            if zero_terms.contains(&name.as_str()) {
                continue;
            }
            if name == INTERCEPT {
                eta.iter_mut().for_each(|e| *e += b);
            } else {
                let x = data.numeric(name)?;
                eta.iter_mut().zip(x).for_each(|(e, v)| *e += b * v);
            }
        }
        for fe in &self.fixed_effects {
            if zero_terms.contains(&fe.name.as_str()) {
                continue;
            }
            let index: std::collections::HashMap<&str, f64> =
                fe.levels.iter().map(String::as_str).zip(fe.values.iter().copied()).collect();
            for (r, e) in eta.iter_mut().enumerate() {
                let parts: Vec<&str> = fe.columns.iter().map(|c| data.label(c, r)).collect::<Result<_>>()?;
                let label = parts.join("#");
                let v = index.get(label.as_str()).ok_or_else(|| EstimationError::UnknownLevel {
                    dim: fe.name.clone(),
                    level: label.clone(),
                })?;
                *e += v;
            }
        }
        Ok(match self.family {
            Family::Ols => eta,
            Family::Ppml => eta.into_iter().map(f64::exp).collect(),
        })
    }
}

struct Design {
    names: Vec<String>,
    x: DMatrix<f64>,
    y: Vec<f64>,
    w: Vec<f64>,
    absorber: Absorber,
    fe_meta: Vec<(String, Vec<String>, Vec<String>, Vec<usize>)>,
    clusters: Vec<usize>,
    n_clusters: usize,
}

fn build_design(data: &Dataset, spec: &RegressionSpec, keep: &[bool]) -> Result<Design> {
    let rows: Vec<usize> = (0..data.nrows()).filter(|r| keep[*r]).collect();
    let pick = |v: &[f64]| rows.iter().map(|r| v[*r]).collect::<Vec<f64>>();
    let y = pick(data.numeric(&spec.response)?);
    let w = match &spec.weights {
        Some(c) => pick(data.numeric(c)?),
        None => vec![1.0; rows.len()],
    };
    let mut names = spec.covariates.clone();
    if spec.has_intercept_column() {
        names.push(INTERCEPT.to_string());
    }
    let mut x = DMatrix::zeros(rows.len(), names.len());
    for (j, name) in names.iter().enumerate() {
        if name == INTERCEPT {
            x.column_mut(j).fill(1.0);
        } else {
            let col = data.numeric(name)?;
            for (k, r) in rows.iter().enumerate() {
                x[(k, j)] = col[*r];
            }
        }
    }
    let mut dims = Vec::new();
    let mut fe_meta = Vec::new();
    for fe in &spec.fixed_effects {
        let (codes, n) = group_codes(data, &fe.0)?;
        let labels = group_labels(data, &fe.0, &codes, n)?;
        // Re-index onto kept rows so unused levels do not appear as empty groups.
        let mut remap = vec![usize::MAX; n];
        let mut kept_labels = Vec::new();
        let mut sub = Vec::with_capacity(rows.len());
        for r in &rows {
            let g = codes[*r];
            if remap[g] == usize::MAX {
                remap[g] = kept_labels.len();
                kept_labels.push(labels[g].clone());
            }
            sub.push(remap[g]);
        }
        dims.push(Dim { codes: sub.clone(), levels: kept_labels.len() });
        fe_meta.push((fe.name(), fe.0.clone(), kept_labels, sub));
    }
    let (clusters, n_clusters) = match &spec.cluster {
        Some(c) => {
            let (codes, _) = data.categorical(c)?;
            let (sub, levels) = crate::dataset::encode_levels(
                &rows.iter().map(|r| codes[*r].to_string()).collect::<Vec<_>>(),
            );
            (sub, levels.len())
        }
        None => ((0..rows.len()).collect(), rows.len()),
    };
    Ok(Design {
        names,
        x,
        y,
        w,
        absorber: Absorber::new(dims),
        fe_meta,
        clusters,
        n_clusters,
    })
}

/// Rows in groups whose response is identically zero (PPML separation by a
/// fixed effect). Iterated because dropping rows can create new such groups.
fn separated_rows(data: &Dataset, spec: &RegressionSpec) -> Result<Vec<bool>> {
    let y = data.numeric(&spec.response)?;
    let mut keep = vec![true; data.nrows()];
    if spec.family != Family::Ppml {
        return Ok(keep);
    }
    let dims: Vec<(Vec<usize>, usize)> = spec
        .fixed_effects
        .iter()
        .map(|fe| group_codes(data, &fe.0))
        .collect::<Result<_>>()?;
    loop {
        let mut changed = false;
        for (codes, n) in &dims {
            let mut total = vec![0.0; *n];
            let mut present = vec![false; *n];
            for r in 0..y.len() {
                if keep[r] {
                    total[codes[r]] += y[r];
                    present[codes[r]] = true;
                }
            }
            for r in 0..y.len() {
                if keep[r] && present[codes[r]] && total[codes[r]] == 0.0 {
                    keep[r] = false;
                    changed = true;
                }
            }
        }
        if !changed {
            return Ok(keep);
        }
    }
}

fn demean_columns(ab: &Absorber, x: &DMatrix<f64>, w: &[f64], tol: f64) -> DMatrix<f64> {
    let cols: Vec<Vec<f64>> = (0..x.ncols())
        .into_par_iter()
        .map(|j| {
            let col: Vec<f64> = x.column(j).iter().copied().collect();
            ab.demean(&col, w, tol, MAX_SWEEPS)
        })
        .collect();
    let mut out = DMatrix::zeros(x.nrows(), x.ncols());
    for (j, c) in cols.into_iter().enumerate() {
        out.column_mut(j).copy_from_slice(&c);
    }
    out
}

const MAX_SWEEPS: usize = 100_000;

/// Indices of columns kept after dropping those absorbed by the fixed
/// effects or collinear with earlier columns (weighted Gram-Schmidt).
fn independent_columns(raw: &DMatrix<f64>, dm: &DMatrix<f64>, w: &[f64]) -> Vec<usize> {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).zip(w).map(|((x, y), z)| x * y * z).sum::<f64>();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut kept = Vec::new();
    for j in 0..dm.ncols() {
        let raw_j: Vec<f64> = raw.column(j).iter().copied().collect();
        let mut v: Vec<f64> = dm.column(j).iter().copied().collect();
        let raw_norm = dot(&raw_j, &raw_j);
        let dm_norm = dot(&v, &v);
        if raw_norm == 0.0 || dm_norm <= 1e-9 * raw_norm {
            continue;
        }
        for b in &basis {
            let c = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
        }
        let rest = dot(&v, &v);
        if rest <= 1e-9 * dm_norm {
            continue;
        }
        let s = rest.sqrt();
        v.iter_mut().for_each(|x| *x /= s);
        basis.push(v);
        kept.push(j);
    }
    kept
}

/// Weighted least squares through QR of `sqrt(w) X`. Returns the
/// coefficients and `(X'WX)^{-1}`.
fn wls(x: &DMatrix<f64>, z: &[f64], w: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (n, k) = x.shape();
    if k == 0 {
        return Ok((DVector::zeros(0), DMatrix::zeros(0, 0)));
    }
    let mut a = x.clone();
    let mut b = DVector::zeros(n);
    for i in 0..n {
        let s = w[i].sqrt();
        a.row_mut(i).scale_mut(s);
        b[i] = z[i] * s;
    }
    let qr = a.qr();
    let r = qr.r();
    let qtb = qr.q().transpose() * b;
    let beta = r.solve_upper_triangular(&qtb).ok_or(EstimationError::Singular)?;
    let rinv = r
        .solve_upper_triangular(&DMatrix::identity(k, k))
        .ok_or(EstimationError::Singular)?;
    let bread = &rinv * rinv.transpose();
    if beta.iter().any(|v| !v.is_finite()) {
        return Err(EstimationError::Singular);
    }
    Ok((beta, bread))
}

fn sandwich(
    bread: &DMatrix<f64>,
    xdm: &DMatrix<f64>,
    score_weight: &[f64],
    clusters: &[usize],
    n_clusters: usize,
    scale: f64,
) -> DMatrix<f64> {
    let k = xdm.ncols();
    let mut sums = DMatrix::zeros(n_clusters, k);
    for i in 0..xdm.nrows() {
        let g = clusters[i];
        for j in 0..k {
            sums[(g, j)] += xdm[(i, j)] * score_weight[i];
        }
    }
    let meat = sums.transpose() * &sums;
    bread * meat * bread * scale
}

fn poisson_deviance(y: &[f64], mu: &[f64], w: &[f64]) -> f64 {
    2.0 * y
        .iter()
        .zip(mu)
        .zip(w)
        .map(|((y, m), w)| {
            let t = if *y > 0.0 { y * (y / m).ln() } else { 0.0 };
            w * (t - (y - m))
        })
        .sum::<f64>()
}

pub fn fit(data: &Dataset, spec: &RegressionSpec) -> Result<FitResult> {
    let mut warnings = spec.validate(data)?;
    let keep = separated_rows(data, spec)?;
    let dropped_rows: Vec<usize> = (0..data.nrows()).filter(|r| !keep[*r]).collect();
    if !dropped_rows.is_empty() {
        warnings.push(format!(
            "{} observations in all-zero fixed-effect groups dropped (separation)",
            dropped_rows.len()
        ));
    }
    let design = build_design(data, spec, &keep)?;
    if design.y.is_empty() {
        return Err(EstimationError::NoObservations);
    }
    if spec.cluster.is_some() {
        let mut sizes = vec![0usize; design.n_clusters];
        design.clusters.iter().for_each(|g| sizes[*g] += 1);
        let singles = sizes.iter().filter(|s| **s == 1).count();
        if singles > 0 {
            warnings.push(format!("{singles} single-observation clusters"));
        }
    }
    let mut result = match spec.family {
        Family::Ols => fit_ols(&design, spec, &mut warnings)?,
        Family::Ppml => fit_ppml(&design, spec, &mut warnings)?,
    };
    // Expand fitted values back to the full row set.
    let mut fitted = vec![0.0; data.nrows()];
    let mut k = 0;
    for (r, f) in fitted.iter_mut().enumerate() {
        if keep[r] {
            *f = result.fitted[k];
            k += 1;
        }
    }
    result.fitted = fitted;
    if !dropped_rows.is_empty() {
        add_separated_levels(data, spec, &keep, &mut result)?;
    }
    result.dropped_rows = dropped_rows;
    result.warnings = warnings;
    Ok(result)
}

fn add_separated_levels(
    data: &Dataset,
    spec: &RegressionSpec,
    keep: &[bool],
    result: &mut FitResult,
) -> Result<()> {
    for (fe, est) in spec.fixed_effects.iter().zip(result.fixed_effects.iter_mut()) {
        for r in (0..data.nrows()).filter(|r| !keep[*r]) {
            let parts: Vec<&str> = fe.0.iter().map(|c| data.label(c, r)).collect::<Result<_>>()?;
            let label = parts.join("#");
            if !est.levels.contains(&label) {
                est.levels.push(label);
                est.values.push(f64::NEG_INFINITY);
            }
        }
    }
    Ok(())
}

struct Core {
    kept: Vec<usize>,
    beta: DVector<f64>,
    bread: DMatrix<f64>,
    xdm: DMatrix<f64>,
}

fn solve_step(design: &Design, z: &[f64], w: &[f64], tol: f64) -> Result<(Core, Vec<f64>)> {
    let zdm = design.absorber.demean(z, w, tol, MAX_SWEEPS);
    let xdm_all = demean_columns(&design.absorber, &design.x, w, tol);
    let kept = independent_columns(&design.x, &xdm_all, w);
    let xdm = xdm_all.select_columns(&kept);
    let (beta, bread) = wls(&xdm, &zdm, w)?;
    let fit_dm = &xdm * &beta;
    let resid: Vec<f64> = zdm.iter().zip(fit_dm.iter()).map(|(a, b)| a - b).collect();
    Ok((Core { kept, beta, bread, xdm }, resid))
}

fn fe_estimates(design: &Design, fe_part: &[f64], w: &[f64], tol: f64) -> Vec<FeEstimates> {
    let proj = design.absorber.project(fe_part, w, tol * 1e-2, MAX_SWEEPS);
    design
        .fe_meta
        .iter()
        .zip(proj.effects)
        .map(|((name, cols, levels, _), values)| FeEstimates {
            name: name.clone(),
            columns: cols.clone(),
            levels: levels.clone(),
            values,
        })
        .collect()
}

fn assemble(
    design: &Design,
    core: &Core,
    vcov: DMatrix<f64>,
    warnings: &mut Vec<String>,
) -> (Vec<String>, Vec<f64>, Vec<f64>, Vec<Vec<f64>>, Vec<String>) {
    let names: Vec<String> = core.kept.iter().map(|j| design.names[*j].clone()).collect();
    let dropped: Vec<String> = (0..design.names.len())
        .filter(|j| !core.kept.contains(j))
        .map(|j| design.names[j].clone())
        .collect();
    for d in &dropped {
        warnings.push(format!("covariate `{d}` dropped as collinear"));
    }
    let se = (0..names.len()).map(|j| vcov[(j, j)].max(0.0).sqrt()).collect();
    let v = (0..vcov.nrows())
        .map(|i| (0..vcov.ncols()).map(|j| vcov[(i, j)]).collect())
        .collect();
    (names, core.beta.iter().copied().collect(), se, v, dropped)
}

fn linear_part(design: &Design, core: &Core) -> Vec<f64> {
    let xk = design.x.select_columns(&core.kept);
    (&xk * &core.beta).iter().copied().collect()
}

fn fit_ols(design: &Design, spec: &RegressionSpec, warnings: &mut Vec<String>) -> Result<FitResult> {
    let w = &design.w;
    let (core, resid) = solve_step(design, &design.y, w, spec.absorb_tol)?;
    let n = design.y.len();
    let k = core.kept.len();
    let g = design.n_clusters as f64;
    let scale = if n > k && g > 1.0 {
        g / (g - 1.0) * (n as f64 - 1.0) / (n - k) as f64
    } else {
        f64::NAN
    };
    let score_w: Vec<f64> = resid.iter().zip(w).map(|(e, w)| e * w).collect();
    let vcov = sandwich(&core.bread, &core.xdm, &score_w, &design.clusters, design.n_clusters, scale);
    let fitted: Vec<f64> = design.y.iter().zip(&resid).map(|(y, e)| y - e).collect();
    let lin = linear_part(design, &core);
    let fe_part: Vec<f64> = fitted.iter().zip(&lin).map(|(f, l)| f - l).collect();
    let fixed_effects = fe_estimates(design, &fe_part, w, spec.absorb_tol);
    let wsum: f64 = w.iter().sum();
    let ybar = design.y.iter().zip(w).map(|(y, w)| y * w).sum::<f64>() / wsum;
    let tss: f64 = design.y.iter().zip(w).map(|(y, w)| w * (y - ybar).powi(2)).sum();
    let rss: f64 = resid.iter().zip(w).map(|(e, w)| w * e * e).sum();
    let (names, coefficients, std_errors, vcov, dropped) = assemble(design, &core, vcov, warnings);
    Ok(FitResult {
        family: Family::Ols,
        names,
        coefficients,
        std_errors,
        vcov,
        r2: if tss > 0.0 { 1.0 - rss / tss } else { 1.0 },
        fitted,
        iterations: 1,
        deviance: None,
        deviance_change: 0.0,
        dropped_covariates: dropped,
        dropped_rows: Vec::new(),
        fixed_effects,
        n_obs: n,
        n_clusters: design.n_clusters,
        warnings: Vec::new(),
    })
}

fn fit_ppml(design: &Design, spec: &RegressionSpec, warnings: &mut Vec<String>) -> Result<FitResult> {
    let y = &design.y;
    let uw = &design.w;
    let wsum: f64 = uw.iter().sum();
    let ybar = y.iter().zip(uw).map(|(y, w)| y * w).sum::<f64>() / wsum;
    if ybar <= 0.0 {
        return Err(EstimationError::NoObservations);
    }
    let mut mu: Vec<f64> = y.iter().map(|v| 0.5 * (v + ybar)).collect();
    let mut eta: Vec<f64> = mu.iter().map(|m| m.ln()).collect();
    let mut dev_old = poisson_deviance(y, &mu, uw);
    let mut change = f64::INFINITY;
    for iter in 1..=spec.max_iter {
        let z: Vec<f64> = eta.iter().zip(y).zip(&mu).map(|((e, y), m)| e + (y - m) / m).collect();
        let w: Vec<f64> = mu.iter().zip(uw).map(|(m, u)| m * u).collect();
        let (core, resid) = solve_step(design, &z, &w, spec.absorb_tol)?;
        let eta_new: Vec<f64> = z.iter().zip(&resid).map(|(z, e)| z - e).collect();
        let step = eta_new.iter().zip(&eta).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        eta = eta_new;
        mu = eta.iter().map(|e| e.exp()).collect();
        let dev = poisson_deviance(y, &mu, uw);
        change = (dev - dev_old).abs() / (dev.abs() + 0.1);
        dev_old = dev;
        if !dev.is_finite() || mu.iter().any(|m| !m.is_finite()) {
            break;
        }
        if change < 1e-10 && step < 1e-6 {
            // Refresh the demeaned design at the final weights for inference.
            let w: Vec<f64> = mu.iter().zip(uw).map(|(m, u)| m * u).collect();
            let xdm_all = demean_columns(&design.absorber, &design.x, &w, spec.absorb_tol);
            let xdm = xdm_all.select_columns(&core.kept);
            let (_, bread) = wls(&xdm, &vec![0.0; y.len()], &w)?;
            let core = Core { xdm, bread, ..core };
            let score_w: Vec<f64> = y.iter().zip(&mu).zip(uw).map(|((y, m), u)| (y - m) * u).collect();
            let g = design.n_clusters as f64;
            let scale = if g > 1.0 { g / (g - 1.0) } else { f64::NAN };
            let vcov = sandwich(&core.bread, &core.xdm, &score_w, &design.clusters, design.n_clusters, scale);
            let lin = linear_part(design, &core);
            let fe_part: Vec<f64> = eta.iter().zip(&lin).map(|(e, l)| e - l).collect();
            let fixed_effects = fe_estimates(design, &fe_part, &w, spec.absorb_tol);
            let null_mu = vec![ybar; y.len()];
            let null_dev = poisson_deviance(y, &null_mu, uw);
            let (names, mut coefficients, std_errors, vcov, dropped) = assemble(design, &core, vcov, warnings);
            // Intercept-only MLE has a closed form; return it rather than the iterate.
            if spec.covariates.is_empty() && spec.fixed_effects.is_empty() && coefficients.len() == 1 {
                coefficients[0] = ybar.ln();
                mu.fill(ybar);
            }
            return Ok(FitResult {
                family: Family::Ppml,
                names,
                coefficients,
                std_errors,
                vcov,
                r2: if null_dev > 0.0 { 1.0 - dev / null_dev } else { 1.0 },
                fitted: mu,
                iterations: iter,
                deviance: Some(dev),
                deviance_change: change,
                dropped_covariates: dropped,
                dropped_rows: Vec::new(),
                fixed_effects,
                n_obs: y.len(),
                n_clusters: design.n_clusters,
                warnings: Vec::new(),
            });
        }
    }
    Err(EstimationError::NoConvergence { iterations: spec.max_iter, change })
}
