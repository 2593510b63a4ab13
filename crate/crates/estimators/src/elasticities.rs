//! Tax-base and profit-shifting elasticities from log-share regressions.
//!
//! Both regressions put a coefficient `delta` on `ln(1 - t)`; the structural
//! parameter follows as `(delta + 1) * (sigma - 1)`.

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{EstimationError, Result};
use crate::fit::{fit, FitResult};
use crate::spec::{Family, RegressionSpec};

pub const NET_TAX: &str = "ln_net_of_tax";
pub const LOG_SHARE: &str = "ln_share";
pub const LOG_DIFFERENTIAL: &str = "ln_tax_differential";

pub fn implied_upsilon(delta: f64, sigma: f64) -> f64 {
    (delta + 1.0) * (sigma - 1.0)
}

/// Column roles for the share regressions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShareDesign {
    pub share: String,
    pub tax: String,
    /// Fixed-effect dimensions; each entry may be an interaction.
    pub fixed_effects: Vec<Vec<String>>,
    #[serde(default)]
    pub controls: Vec<String>,
    #[serde(default)]
    pub cluster: Option<String>,
    pub family: Family,
}

impl ShareDesign {
    /// Tax-base share on `ln(1 - t_ll)` with residence effects.
    pub fn tax_base(share: &str, tax: &str, residence: &str, controls: &[&str]) -> Self {
        Self {
            share: share.into(),
            tax: tax.into(),
            fixed_effects: vec![vec![residence.into()]],
            controls: controls.iter().map(|s| s.to_string()).collect(),
            cluster: None,
            family: Family::Ols,
        }
    }

    /// Shifted-profit share on `ln(1 - t_h)` with residence-by-source effects.
    pub fn shifting(share: &str, tax: &str, residence: &str, source: &str, controls: &[&str]) -> Self {
        Self {
            share: share.into(),
            tax: tax.into(),
            fixed_effects: vec![vec![residence.into(), source.into()]],
            controls: controls.iter().map(|s| s.to_string()).collect(),
            cluster: None,
            family: Family::Ols,
        }
    }

    pub fn with_family(mut self, family: Family) -> Self {
        self.family = family;
        self
    }

    pub fn with_cluster(mut self, col: &str) -> Self {
        self.cluster = Some(col.into());
        self
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ElasticityEstimate {
    pub delta: f64,
    pub se: f64,
    pub upsilon: f64,
    pub fit: FitResult,
}

fn prepare(data: &Dataset, design: &ShareDesign, extra: Option<&str>) -> Result<(Dataset, RegressionSpec)> {
    let share = data.numeric(&design.share)?;
    let tax = data.numeric(&design.tax)?;
    if let Some(row) = tax.iter().position(|t| !(0.0..1.0).contains(t)) {
        return Err(EstimationError::Elasticity {
            what: "tax rate",
            reason: format!("rate {} at row {row} outside [0, 1)", tax[row]),
        });
    }
    let mut work = data.clone();
    work.add_numeric(NET_TAX, tax.iter().map(|t| (1.0 - t).ln()).collect())?;
    let response = match design.family {
        Family::Ols => {
            if let Some(row) = share.iter().position(|s| *s <= 0.0) {
                return Err(EstimationError::Elasticity {
                    what: "log share",
                    reason: format!("nonpositive share at row {row}; use the PPML path"),
                });
            }
            work.add_numeric(LOG_SHARE, share.iter().map(|s| s.ln()).collect())?;
            LOG_SHARE
        }
        Family::Ppml => design.share.as_str(),
    };
    let mut spec = RegressionSpec::new(response, design.family).covariate(NET_TAX);
    if let Some(col) = extra {
        spec = spec.covariate(col);
    }
    for c in &design.controls {
        spec = spec.covariate(c);
    }
    for fe in &design.fixed_effects {
        let cols: Vec<&str> = fe.iter().map(String::as_str).collect();
        spec = spec.fe(&cols);
    }
    if let Some(c) = &design.cluster {
        spec = spec.cluster(c);
    }
    Ok((work, spec))
}

fn estimate(data: &Dataset, design: &ShareDesign, sigma: f64) -> Result<ElasticityEstimate> {
    if sigma <= 1.0 {
        return Err(EstimationError::Elasticity {
            what: "sigma",
            reason: format!("sigma = {sigma} must exceed 1"),
        });
    }
    let (work, spec) = prepare(data, design, None)?;
    let fit = fit(&work, &spec)?;
    let delta = fit.coef(NET_TAX).ok_or_else(|| EstimationError::Elasticity {
        what: "net-of-tax coefficient",
        reason: "absorbed by fixed effects".into(),
    })?;
    Ok(ElasticityEstimate {
        delta,
        se: fit.se(NET_TAX).unwrap_or(f64::NAN),
        upsilon: implied_upsilon(delta, sigma),
        fit,
    })
}

/// Tax-base elasticity parameter from `ln(X_ill / sum_l X_ill)`.
pub fn estimate_upsilon1(data: &Dataset, design: &ShareDesign, sigma: f64) -> Result<ElasticityEstimate> {
    estimate(data, design, sigma)
}

/// One pass of the shifting-share regression.
pub fn estimate_upsilon2(data: &Dataset, design: &ShareDesign, sigma: f64) -> Result<ElasticityEstimate> {
    estimate(data, design, sigma)
}

#[derive(Debug, Clone, Serialize)]
pub struct IterativeEstimate {
    pub estimate: ElasticityEstimate,
    pub upsilon2: f64,
    pub iterations: usize,
    /// Starting value followed by each round's estimate.
    pub trace: Vec<f64>,
}

/// Alternates between rebuilding the shifting dataset for a candidate
/// `upsilon2` (the callback) and re-estimating it, until two consecutive
/// values differ by less than `tol` or `max_rounds` pass.
pub fn estimate_upsilon2_iterative<F>(
    initial: f64,
    sigma: f64,
    design: &ShareDesign,
    tol: f64,
    max_rounds: usize,
    mut rebuild: F,
) -> Result<IterativeEstimate>
where
    F: FnMut(f64) -> std::result::Result<Dataset, String>,
{
    let mut trace = vec![initial];
    let mut current = initial;
    for round in 1..=max_rounds {
        let data = rebuild(current).map_err(EstimationError::Callback)?;
        let est = estimate_upsilon2(&data, design, sigma)?;
        let next = est.upsilon;
        if !next.is_finite() {
            return Err(EstimationError::Elasticity {
                what: "upsilon2 iteration",
                reason: format!("non-finite estimate at round {round}"),
            });
        }
        trace.push(next);
        if (next - current).abs() < tol {
            return Ok(IterativeEstimate { estimate: est, upsilon2: next, iterations: round, trace });
        }
        let k = trace.len() - 1;
        for lag in 2..=4 {
            if k >= lag && (trace[k] - trace[k - lag]).abs() < tol {
                let start = trace.len().saturating_sub(2 * lag);
                return Err(EstimationError::Oscillation { iterates: trace[start..].to_vec() });
            }
        }
        current = next;
    }
    Err(EstimationError::Elasticity {
        what: "upsilon2 iteration",
        reason: format!("no convergence after {max_rounds} rounds; last iterates {:?}", &trace[trace.len().saturating_sub(4)..]),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ShapeEstimate {
    pub upsilon2: f64,
    /// Coefficient on `ln(t_l - t_lh)`, equal to `k * upsilon2 / upsilon1`.
    pub differential_coef: f64,
    pub shape_k: f64,
    pub fit: FitResult,
}

/// Shifting-share regression augmented with the log tax differential
/// between the source and the haven. Rows with a nonpositive differential
/// carry no shifting under the variable-elasticity form and are rejected.
pub fn estimate_shape_k(
    data: &Dataset,
    design: &ShareDesign,
    source_tax: &str,
    sigma: f64,
    upsilon1: f64,
) -> Result<ShapeEstimate> {
    let tl = data.numeric(source_tax)?;
    let th = data.numeric(&design.tax)?;
    let diff: Vec<f64> = tl.iter().zip(th).map(|(a, b)| a - b).collect();
    if let Some(row) = diff.iter().position(|d| *d <= 0.0) {
        return Err(EstimationError::Elasticity {
            what: "shape k",
            reason: format!("nonpositive tax differential at row {row}"),
        });
    }
    let mut base = data.clone();
    base.add_numeric(LOG_DIFFERENTIAL, diff.iter().map(|d| d.ln()).collect())?;
    let (work, spec) = prepare(&base, design, Some(LOG_DIFFERENTIAL))?;
    let fit = fit(&work, &spec)?;
    let delta = fit.coef(NET_TAX).ok_or_else(|| EstimationError::Elasticity {
        what: "net-of-tax coefficient",
        reason: "absorbed by fixed effects".into(),
    })?;
    let coef = fit.coef(LOG_DIFFERENTIAL).ok_or_else(|| EstimationError::Elasticity {
        what: "differential coefficient",
        reason: "absorbed by fixed effects".into(),
    })?;
    let upsilon2 = implied_upsilon(delta, sigma);
    Ok(ShapeEstimate {
        upsilon2,
        differential_coef: coef,
        shape_k: coef * upsilon1 / upsilon2,
        fit,
    })
}
