//! Structural parameters of one world and their validation.

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::country::CountrySet;
use crate::serde_inf;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Elasticities {
    pub sigma: f64,
    pub upsilon1: f64,
    pub upsilon2: f64,
    #[serde(default)]
    pub shape_k: f64,
}

impl Default for Elasticities {
    fn default() -> Self {
        Self { sigma: 6.88, upsilon1: 21.4, upsilon2: 52.1, shape_k: 0.0 }
    }
}

impl Elasticities {
    /// Variable-elasticity calibration.
    pub fn variable() -> Self {
        Self { sigma: 6.88, upsilon1: 21.4, upsilon2: 43.6, shape_k: 0.23 }
    }

    pub fn new(sigma: f64, upsilon1: f64, upsilon2: f64) -> Self {
        Self { sigma, upsilon1, upsilon2, shape_k: 0.0 }
    }

    /// Ratio of the within-nest to the top-level exponent.
    pub fn rho(&self) -> f64 {
        self.upsilon2 / self.upsilon1
    }

    /// Exponent on `(1 - t)` inside the choice numerators.
    pub fn tax_exponent(&self) -> f64 {
        self.upsilon1 / (self.sigma - 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldCalibration {
    pub countries: CountrySet,
    pub elasticities: Elasticities,
    pub labor: Vec<f64>,
    pub tech: Vec<f64>,
    pub wedge: Vec<f64>,
    #[serde(with = "serde_inf::matrix")]
    pub trade_frictions: DMatrix<f64>,
    #[serde(with = "serde_inf::matrix")]
    pub mp_frictions: DMatrix<f64>,
    /// Rows: all countries (haven rows are `inf`); columns: haven slots.
    #[serde(with = "serde_inf::matrix")]
    pub ps_frictions: DMatrix<f64>,
    /// `inf` for havens and for residences that never shift.
    #[serde(with = "serde_inf::vec")]
    pub aggressiveness: Vec<f64>,
    pub theta_bar: f64,
    pub tax_domestic: Vec<f64>,
    pub tax_haven: Vec<f64>,
    pub imbalances: Vec<f64>,
    pub entry_cost: Vec<f64>,
    pub firm_mass: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub index: Vec<usize>,
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.index.is_empty() {
            write!(f, "{}: {}", self.field, self.rule)
        } else {
            write!(f, "{}{:?}: {}", self.field, self.index, self.rule)
        }
    }
}

struct Collector(Vec<Violation>);

impl Collector {
    fn push(&mut self, field: &str, index: &[usize], rule: impl Into<String>) {
        self.0.push(Violation { field: field.into(), index: index.to_vec(), rule: rule.into() });
    }

    fn len(&mut self, field: &str, got: usize, want: usize) -> bool {
        if got != want {
            self.push(field, &[], format!("length {got}, expected {want}"));
            return false;
        }
        true
    }

    fn shape(&mut self, field: &str, m: &DMatrix<f64>, rows: usize, cols: usize) -> bool {
        if m.shape() != (rows, cols) {
            self.push(field, &[], format!("shape {:?}, expected ({rows}, {cols})", m.shape()));
            return false;
        }
        true
    }
}

/// Theta-bar normalizer: `sum_l A_l / (H sum_l A_l^rho)^(1/rho)` over
/// non-haven sources. The nest scale `theta_bar^(-upsilon1)` equals it, so
/// with unit frictions the odds of shifting against not shifting are one.
pub fn theta_bar_normalizer(countries: &CountrySet, tech: &[f64], el: &Elasticities) -> f64 {
    let rho = el.rho();
    let h = countries.n_havens() as f64;
    let nh = countries.non_havens();
    let sum_a: f64 = nh.iter().map(|l| tech[*l]).sum();
    let sum_ar: f64 = nh.iter().map(|l| tech[*l].powf(rho)).sum();
    sum_a / (h * sum_ar).powf(1.0 / rho)
}

pub fn theta_bar_from_tech(countries: &CountrySet, tech: &[f64], el: &Elasticities) -> f64 {
    theta_bar_normalizer(countries, tech, el).powf(-1.0 / el.upsilon1)
}

/// Empty list iff every structural invariant holds.
pub fn validate_world(w: &WorldCalibration) -> Vec<Violation> {
    let mut v = Collector(Vec::new());
    let c = &w.countries;
    let n = c.len();
    let h = c.n_havens();
    if c.haven.len() != n {
        v.push("countries.haven", &[], "one flag per label");
    }
    if h == 0 {
        v.push("countries", &[], "at least one haven required");
    }
    if n - h.min(n) < 2 {
        v.push("countries", &[], "at least two non-havens required");
    }
    if c.reference >= n || c.haven.get(c.reference).copied().unwrap_or(true) {
        v.push("countries.reference", &[c.reference], "reference residence must be a non-haven");
    }
    if c.numeraire >= n {
        v.push("countries.numeraire", &[c.numeraire], "out of range");
    }
    for a in 0..n {
        for b in a + 1..n {
            if c.labels[a] == c.labels[b] {
                v.push("countries.labels", &[a, b], format!("duplicate label {}", c.labels[a]));
            }
        }
    }

    let e = &w.elasticities;
    if !(e.sigma > 1.0) {
        v.push("elasticities.sigma", &[], "σ must exceed 1");
    }
    if !(e.upsilon1 > e.sigma - 1.0) {
        v.push("elasticities.upsilon1", &[], format!("ν₁ ≤ σ−1 ({} ≤ {})", e.upsilon1, e.sigma - 1.0));
    }
    if !(e.upsilon2 >= e.upsilon1) {
        v.push("elasticities.upsilon2", &[], "ν₂ must be at least ν₁");
    }
    if !(e.shape_k >= 0.0) {
        v.push("elasticities.shape_k", &[], "k must be nonnegative");
    }

    let vectors: [(&str, &Vec<f64>, usize); 9] = [
        ("labor", &w.labor, n),
        ("tech", &w.tech, n),
        ("wedge", &w.wedge, n),
        ("aggressiveness", &w.aggressiveness, n),
        ("tax_domestic", &w.tax_domestic, n),
        ("tax_haven", &w.tax_haven, h),
        ("imbalances", &w.imbalances, n),
        ("entry_cost", &w.entry_cost, n),
        ("firm_mass", &w.firm_mass, n),
    ];
    let mut sized = true;
    for (name, vec, want) in vectors {
        sized &= v.len(name, vec.len(), want);
    }
    sized &= v.shape("trade_frictions", &w.trade_frictions, n, n);
    sized &= v.shape("mp_frictions", &w.mp_frictions, n, n);
    sized &= v.shape("ps_frictions", &w.ps_frictions, n, h);
    if !sized {
        return v.0;
    }

    for k in 0..n {
        if !(w.labor[k] > 0.0 && w.labor[k].is_finite()) {
            v.push("labor", &[k], "must be positive");
        }
        if !(w.tech[k] > 0.0 && w.tech[k].is_finite()) {
            v.push("tech", &[k], "must be positive");
        }
        if !(w.wedge[k] > 0.0 && w.wedge[k] <= e.sigma) {
            v.push("wedge", &[k], "ι must lie in (0, σ]");
        }
        if !(0.0..1.0).contains(&w.tax_domestic[k]) {
            v.push("tax_domestic", &[k], "rate must lie in [0, 1)");
        }
        if !w.imbalances[k].is_finite() {
            v.push("imbalances", &[k], "must be finite");
        }
        if !(w.entry_cost[k] > 0.0 && w.entry_cost[k].is_finite()) {
            v.push("entry_cost", &[k], "must be positive");
        }
        if !(w.firm_mass[k] >= 0.0 && w.firm_mass[k].is_finite()) {
            v.push("firm_mass", &[k], "must be nonnegative");
        }
        if c.haven[k] {
            if w.aggressiveness[k] != f64::INFINITY {
                v.push("aggressiveness", &[k], "havens do not shift (θ must be inf)");
            }
            if w.ps_frictions.row(k).iter().any(|a| *a != f64::INFINITY) {
                v.push("ps_frictions", &[k], "no profit shifted out of havens (row must be inf)");
            }
        } else {
            if !(w.aggressiveness[k] > 0.0) {
                v.push("aggressiveness", &[k], "θ must be positive");
            }
            for j in 0..h {
                if !(w.ps_frictions[(k, j)] > 0.0) {
                    v.push("ps_frictions", &[k, j], "α must be positive (inf forbids the flow)");
                }
            }
        }
        for m in 0..n {
            let t = w.trade_frictions[(k, m)];
            let g = w.mp_frictions[(k, m)];
            if k == m {
                if t != 1.0 {
                    v.push("trade_frictions", &[k, m], "domestic trade friction ≠ 1");
                }
                if g != 1.0 {
                    v.push("mp_frictions", &[k, m], "domestic MP friction ≠ 1");
                }
            } else {
                if !(t >= 1.0 && t.is_finite()) {
                    v.push("trade_frictions", &[k, m], "must be finite and ≥ 1");
                }
                if !(g >= 1.0) {
                    v.push("mp_frictions", &[k, m], "must be ≥ 1 (inf marks an absent link)");
                }
            }
        }
    }
    for (j, t) in w.tax_haven.iter().enumerate() {
        if !(0.0..1.0).contains(t) {
            v.push("tax_haven", &[j], "rate must lie in [0, 1)");
        }
    }
    if !(w.theta_bar > 0.0 && w.theta_bar.is_finite()) {
        v.push("theta_bar", &[], "must be positive");
    }
    v.0
}

impl WorldCalibration {
    pub fn n(&self) -> usize {
        self.countries.len()
    }

    pub fn h(&self) -> usize {
        self.countries.n_havens()
    }

    /// Symmetric world used in tests and examples: equal sizes, unit
    /// frictions off the diagonal scaled by `friction`.
    pub fn symmetric(haven: &[bool], friction: f64) -> Self {
        let countries = CountrySet::generic(haven);
        let n = haven.len();
        let h = countries.n_havens();
        let el = Elasticities::default();
        let off = DMatrix::from_fn(n, n, |a, b| if a == b { 1.0 } else { friction });
        let ps = DMatrix::from_fn(n, h, |l, _| if haven[l] { f64::INFINITY } else { friction });
        let tech = vec![1.0; n];
        let theta_bar = theta_bar_from_tech(&countries, &tech, &el);
        WorldCalibration {
            elasticities: el,
            labor: vec![1.0; n],
            tech,
            wedge: vec![1.0; n],
            trade_frictions: off.clone(),
            mp_frictions: off,
            ps_frictions: ps,
            aggressiveness: haven.iter().map(|hv| if *hv { f64::INFINITY } else { theta_bar }).collect(),
            theta_bar,
            tax_domestic: haven.iter().map(|hv| if *hv { 0.05 } else { 0.25 }).collect(),
            tax_haven: vec![0.02; h],
            imbalances: vec![0.0; n],
            entry_cost: vec![0.01; n],
            firm_mass: vec![1.0; n],
            countries,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_world_is_valid() {
        let w = WorldCalibration::symmetric(&[false, false, true], 1.3);
        assert_eq!(validate_world(&w), vec![]);
    }

    #[test]
    fn low_upsilon1_flagged() {
        let mut w = WorldCalibration::symmetric(&[false, false, true], 1.3);
        w.elasticities.upsilon1 = 5.0;
        w.elasticities.upsilon2 = 52.1;
        let v = validate_world(&w);
        assert_eq!(v.len(), 1);
        assert!(v[0].rule.contains("ν₁ ≤ σ−1"));
    }

    #[test]
    fn domestic_trade_friction_flagged() {
        let mut w = WorldCalibration::symmetric(&[false, false, true], 1.3);
        w.trade_frictions[(1, 1)] = 1.2;
        let v = validate_world(&w);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, "domestic trade friction ≠ 1");
        assert_eq!(v[0].index, vec![1, 1]);
    }

    #[test]
    fn haven_shifting_out_flagged() {
        let mut w = WorldCalibration::symmetric(&[false, false, true], 1.3);
        w.ps_frictions[(2, 0)] = 2.0;
        assert!(validate_world(&w).iter().any(|v| v.field == "ps_frictions"));
    }

    #[test]
    fn theta_bar_balances_odds_at_unit_frictions() {
        let c = CountrySet::generic(&[false, false, false, true, true]);
        let tech = [1.0, 2.0, 0.5, 1.0, 1.0];
        let el = Elasticities::default();
        let tb = theta_bar_from_tech(&c, &tech, &el);
        let rho = el.rho();
        let nest = tb.powf(-el.upsilon1)
            * (2.0 * [1.0f64, 2.0, 0.5].iter().map(|a| a.powf(rho)).sum::<f64>()).powf(1.0 / rho);
        assert!((nest / 3.5 - 1.0).abs() < 1e-12);
    }
}
