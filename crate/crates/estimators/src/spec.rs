use serde::{Deserialize, Serialize};

use crate::dataset::{ColumnData, Dataset};
use crate::error::{EstimationError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Ols,
    Ppml,
}

/// One fixed-effect dimension. Several columns form an interaction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedEffect(pub Vec<String>);

impl FixedEffect {
    pub fn single(col: &str) -> Self {
        Self(vec![col.to_string()])
    }

    pub fn interact(cols: &[&str]) -> Self {
        Self(cols.iter().map(|c| c.to_string()).collect())
    }

    pub fn name(&self) -> String {
        self.0.join("#")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionSpec {
    pub response: String,
    #[serde(default)]
    pub covariates: Vec<String>,
    #[serde(default)]
    pub fixed_effects: Vec<FixedEffect>,
    #[serde(default)]
    pub cluster: Option<String>,
    pub family: Family,
    #[serde(default)]
    pub weights: Option<String>,
    /// Add a constant when no fixed effect absorbs it.
    #[serde(default = "default_true")]
    pub intercept: bool,
    #[serde(default = "default_tol")]
    pub absorb_tol: f64,
    #[serde(default = "default_iter")]
    pub max_iter: usize,
}

fn default_true() -> bool {
    true
}
fn default_tol() -> f64 {
    1e-10
}
fn default_iter() -> usize {
    200
}

pub const INTERCEPT: &str = "_cons";

impl RegressionSpec {
    pub fn new(response: &str, family: Family) -> Self {
        Self {
            response: response.to_string(),
            covariates: Vec::new(),
            fixed_effects: Vec::new(),
            cluster: None,
            family,
            weights: None,
            intercept: true,
            absorb_tol: default_tol(),
            max_iter: default_iter(),
        }
    }

    pub fn ols(response: &str) -> Self {
        Self::new(response, Family::Ols)
    }

    pub fn ppml(response: &str) -> Self {
        Self::new(response, Family::Ppml)
    }

    pub fn covariate(mut self, name: &str) -> Self {
        self.covariates.push(name.to_string());
        self
    }

    pub fn covariates(mut self, names: &[&str]) -> Self {
        self.covariates.extend(names.iter().map(|s| s.to_string()));
        self
    }

    pub fn fe(mut self, cols: &[&str]) -> Self {
        self.fixed_effects.push(FixedEffect::interact(cols));
        self
    }

    pub fn cluster(mut self, col: &str) -> Self {
        self.cluster = Some(col.to_string());
        self
    }

    pub fn weights(mut self, col: &str) -> Self {
        self.weights = Some(col.to_string());
        self
    }

    pub fn without_intercept(mut self) -> Self {
        self.intercept = false;
        self
    }

    pub fn has_intercept_column(&self) -> bool {
        self.intercept && self.fixed_effects.is_empty()
    }

    /// Checks columns exist with the right kinds and the response is admissible.
    /// Returns warnings for singleton fixed-effect categories.
    pub fn validate(&self, data: &Dataset) -> Result<Vec<String>> {
        if self.covariates.is_empty() && self.fixed_effects.is_empty() && !self.intercept {
            return Err(EstimationError::EmptyDesign);
        }
        let y = data.numeric(&self.response)?;
        for (row, v) in y.iter().enumerate() {
            if !v.is_finite() {
                return Err(EstimationError::NonFinite {
                    name: self.response.clone(),
                    row,
                });
            }
            if self.family == Family::Ppml && *v < 0.0 {
                return Err(EstimationError::NegativeResponse { row, value: *v });
            }
        }
        for c in self.covariates.iter().chain(self.weights.iter()) {
            let x = data.numeric(c)?;
            if let Some(row) = x.iter().position(|v| !v.is_finite()) {
                return Err(EstimationError::NonFinite { name: c.clone(), row });
            }
        }
        if let Some(w) = &self.weights {
            if let Some(row) = data.numeric(w)?.iter().position(|v| *v < 0.0) {
                return Err(EstimationError::Malformed(format!("negative weight at row {row}")));
            }
        }
        let mut warnings = Vec::new();
        for fe in &self.fixed_effects {
            for c in &fe.0 {
                if !matches!(data.column(c)?.data, ColumnData::Categorical { .. }) {
                    return Err(EstimationError::ColumnType {
                        name: c.clone(),
                        expected: "categorical",
                        found: "numeric",
                    });
                }
            }
            let (codes, n) = group_codes(data, &fe.0)?;
            let mut counts = vec![0usize; n];
            for c in codes {
                counts[c] += 1;
            }
            let singles = counts.iter().filter(|c| **c == 1).count();
            if singles > 0 {
                warnings.push(format!(
                    "fixed effect {} has {singles} single-observation categories",
                    fe.name()
                ));
            }
        }
        if let Some(c) = &self.cluster {
            data.categorical(c)?;
        }
        Ok(warnings)
    }
}

/// Dense group codes for the interaction of categorical columns.
pub fn group_codes(data: &Dataset, cols: &[String]) -> Result<(Vec<usize>, usize)> {
    let parts: Vec<&[usize]> = cols
        .iter()
        .map(|c| data.categorical(c).map(|(codes, _)| codes))
        .collect::<Result<_>>()?;
    let mut index = std::collections::HashMap::new();
    let codes = (0..data.nrows())
        .map(|r| {
            let key: Vec<usize> = parts.iter().map(|p| p[r]).collect();
            let next = index.len();
            *index.entry(key).or_insert(next)
        })
        .collect();
    Ok((codes, index.len()))
}

/// Human-readable label of each group produced by [`group_codes`].
pub fn group_labels(data: &Dataset, cols: &[String], codes: &[usize], n: usize) -> Result<Vec<String>> {
    let mut labels = vec![String::new(); n];
    let mut seen = vec![false; n];
    for (r, &g) in codes.iter().enumerate() {
        if !seen[g] {
            seen[g] = true;
            let parts: Vec<&str> = cols.iter().map(|c| data.label(c, r)).collect::<Result<_>>()?;
            labels[g] = parts.join("#");
        }
    }
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn data() -> Dataset {
        Dataset::new()
            .with_numeric("y", vec![1.0, 0.0, 2.0])
            .unwrap()
            .with_numeric("x", vec![0.1, 0.2, 0.3])
            .unwrap()
            .with_categorical("a", &["u", "u", "v"])
            .unwrap()
            .with_categorical("b", &["p", "q", "p"])
            .unwrap()
    }

    #[test]
    fn interaction_codes() {
        let d = data();
        let (codes, n) = group_codes(&d, &["a".into(), "b".into()]).unwrap();
        assert_eq!(n, 3);
        assert_eq!(codes, vec![0, 1, 2]);
        let labels = group_labels(&d, &["a".into(), "b".into()], &codes, n).unwrap();
        assert_eq!(labels[1], "u#q");
    }

    #[test]
    fn singleton_categories_flagged() {
        let w = RegressionSpec::ols("y").covariate("x").fe(&["a"]).validate(&data()).unwrap();
        assert_eq!(w.len(), 1);
    }

    #[test]
    fn ppml_rejects_negative_response() {
        let d = data().with_numeric("z", vec![1.0, -1.0, 0.0]).unwrap();
        assert!(RegressionSpec::ppml("z").covariate("x").validate(&d).is_err());
    }

    #[test]
    fn fe_on_numeric_column_rejected() {
        assert!(RegressionSpec::ols("y").fe(&["x"]).validate(&data()).is_err());
    }
}
