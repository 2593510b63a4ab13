//! Packaged reforms, partial-versus-general decompositions and the
//! unilateral rate-deviation scan.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::equilibrium::{Equilibrium, Mode};
use crate::error::{ModelError, Result};
use crate::hat::{aggregate_outcomes, solve_counterfactual, Outcomes};
use crate::regime::{MinTax, RateTable, Scope, TaxRegime};
use crate::tensor::Tensor3;
use crate::world::WorldCalibration;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScenarioSpec {
    Noop,
    /// New statutory rate `t · (1 + relative) + absolute`.
    UnilateralRateChange {
        country: usize,
        #[serde(default)]
        relative: f64,
        #[serde(default)]
        absolute: f64,
    },
    /// Shifting out of the targeted sources becomes impossible.
    EndProfitShifting { scope: Scope },
    CloseHaven { haven: usize },
    MinTax(MinTax),
}

impl ScenarioSpec {
    pub fn id(&self) -> String {
        match self {
            ScenarioSpec::Noop => "noop".into(),
            ScenarioSpec::UnilateralRateChange { country, relative, absolute } => {
                format!("rate_change_{country}_{relative}_{absolute}")
            }
            ScenarioSpec::EndProfitShifting { scope: Scope::Multilateral } => "end_shifting_multilateral".into(),
            ScenarioSpec::EndProfitShifting { scope: Scope::Unilateral(c) } => format!("end_shifting_{c}"),
            ScenarioSpec::CloseHaven { haven } => format!("close_haven_{haven}"),
            ScenarioSpec::MinTax(m) => {
                let scope = match m.scope {
                    Scope::Multilateral => "multilateral".to_string(),
                    Scope::Unilateral(c) => format!("unilateral_{c}"),
                };
                let rights = format!("{:?}", m.rights).to_lowercase();
                if m.haven_adjust {
                    format!("min_tax_{}_haven_adjust", m.rate)
                } else {
                    format!("min_tax_{}_{rights}_{scope}", m.rate)
                }
            }
        }
    }

    /// Counterfactual world and regime. `regime` is the baseline regime.
    pub fn apply(&self, world: &WorldCalibration, regime: &TaxRegime) -> Result<(WorldCalibration, TaxRegime)> {
        let mut w = world.clone();
        let n = w.n();
        let check = |k: usize| {
            if k < n {
                Ok(())
            } else {
                Err(ModelError::Input(format!("country index {k} out of range")))
            }
        };
        let r = match self {
            ScenarioSpec::Noop => regime.clone(),
            ScenarioSpec::UnilateralRateChange { country, relative, absolute } => {
                check(*country)?;
                let t = w.tax_domestic[*country] * (1.0 + relative) + absolute;
                if !(0.0..1.0).contains(&t) {
                    return Err(ModelError::Input(format!("new rate {t} outside [0, 1)")));
                }
                w.tax_domestic[*country] = t;
                regime.clone()
            }
            ScenarioSpec::EndProfitShifting { scope } => {
                let rows: Vec<usize> = match scope {
                    Scope::Multilateral => (0..n).collect(),
                    Scope::Unilateral(c) => {
                        check(*c)?;
                        vec![*c]
                    }
                };
                for l in rows {
                    w.ps_frictions.row_mut(l).fill(f64::INFINITY);
                }
                regime.clone()
            }
            ScenarioSpec::CloseHaven { haven } => {
                check(*haven)?;
                let j = w
                    .countries
                    .haven_slot(*haven)
                    .ok_or_else(|| ModelError::Input(format!("country {haven} is not a haven")))?;
                w.ps_frictions.column_mut(j).fill(f64::INFINITY);
                regime.clone()
            }
            ScenarioSpec::MinTax(m) => TaxRegime::MinTax(*m),
        };
        Ok((w, r))
    }
}

/// Tax-revenue change of one collector split into the partial effect and
/// the shifting and real responses, the latter two relative to the partial
/// effect: `ΔB = PE · (1 + ps_effect + real_effect)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RevenueDecomposition {
    pub base: f64,
    pub partial: f64,
    /// Revenue when shifting reallocates within each (residence, source)
    /// pair while production stays put.
    pub shifting_only: f64,
    pub general: f64,
    pub pe_pct: f64,
    pub ge_pct: f64,
    pub ps_effect: f64,
    pub real_effect: f64,
    /// Partial effect is zero; the effects are absolute changes instead.
    pub pe_zero: bool,
}

pub fn decompose_tax_revenue(base: &Equilibrium, cf: &Equilibrium, world_cf: &WorldCalibration, regime_cf: &TaxRegime) -> Result<Vec<RevenueDecomposition>> {
    let rates = RateTable::build(world_cf, regime_cf)?;
    let partial = rates.revenue(&base.pretax);
    let realloc = shifting_only_profits(base, cf);
    let shifting = rates.revenue(&realloc);
    Ok((0..base.n())
        .map(|k| {
            let (b, pe, ps, ge) = (base.revenue[k], partial[k], shifting[k], cf.revenue[k]);
            let d = pe - b;
            let pe_zero = d.abs() <= 1e-13 * b.abs().max(1e-300);
            let pct = |x: f64| if b != 0.0 { 100.0 * (x / b - 1.0) } else { 0.0 };
            let (ps_effect, real_effect) = if pe_zero { (ps - pe, ge - ps) } else { ((ps - pe) / d, (ge - ps) / d) };
            RevenueDecomposition {
                base: b,
                partial: pe,
                shifting_only: ps,
                general: ge,
                pe_pct: pct(pe),
                ge_pct: pct(ge),
                ps_effect,
                real_effect,
                pe_zero,
            }
        })
        .collect())
}

/// Base pre-tax profits of each (i, l) pair spread over booking options in
/// the counterfactual proportions.
fn shifting_only_profits(base: &Equilibrium, cf: &Equilibrium) -> Tensor3 {
    let mut out = base.pretax.clone();
    let n = base.n();
    for i in 0..n {
        for l in 0..n {
            let b: f64 = base.pretax.cell(i, l).iter().sum();
            let c: f64 = cf.pretax.cell(i, l).iter().sum();
            if !(c > 0.0) {
                continue;
            }
            for o in 0..out.options {
                out.set(i, l, o, b * cf.pretax.get(i, l, o) / c);
            }
        }
    }
    out
}

/// Welfare `Y/P` changes in percent, with the general-minus-partial gap
/// split into income and price contributions that add up to it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelfareDecomposition {
    pub w_pe: f64,
    pub w_ge: f64,
    pub wage_pe: f64,
    pub wage_ge: f64,
    pub contrib_wage: f64,
    pub contrib_revenue: f64,
    pub contrib_rent: f64,
    pub contrib_wedge: f64,
    pub contrib_price: f64,
}

impl WelfareDecomposition {
    pub fn contributions(&self) -> f64 {
        self.contrib_wage + self.contrib_revenue + self.contrib_rent + self.contrib_wedge + self.contrib_price
    }
}

pub fn decompose_welfare(
    base: &Equilibrium,
    cf: &Equilibrium,
    world: &WorldCalibration,
    world_cf: &WorldCalibration,
    revenue: &[RevenueDecomposition],
) -> Vec<WelfareDecomposition> {
    let sig = world.elasticities.sigma;
    (0..base.n())
        .map(|k| {
            let (y, p) = (base.expenditure[k], base.price[k]);
            let (y1, p1) = (cf.expenditure[k], cf.price[k]);
            let u = y / p;
            let y_pe = y - revenue[k].base + revenue[k].partial;
            let rent = |e: &Equilibrium, f: f64| e.firm_mass[k] * (e.expected_profit[k] - f * e.wages[k]);
            let scale = 100.0 / u;
            WelfareDecomposition {
                w_pe: 100.0 * (y_pe / y - 1.0),
                w_ge: 100.0 * ((y1 / p1) / u - 1.0),
                wage_pe: 0.0,
                wage_ge: 100.0 * (cf.wages[k] / base.wages[k] - 1.0),
                contrib_wage: scale * world.labor[k] * (cf.wages[k] - base.wages[k]) / p1,
                contrib_revenue: scale * (revenue[k].general - revenue[k].partial) / p1,
                contrib_rent: scale * (rent(cf, world_cf.entry_cost[k]) - rent(base, world.entry_cost[k])) / p1,
                contrib_wedge: scale * (1.0 - world.wedge[k]) * (cf.production[k] - base.production[k]) / sig / p1,
                contrib_price: scale * y_pe * (1.0 / p1 - 1.0 / p),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct ReformResult {
    pub id: String,
    pub scenario: ScenarioSpec,
    pub mode: Mode,
    pub regime: TaxRegime,
    /// "constant" or "variable" shifting elasticity.
    pub variant: String,
    pub outcomes: Outcomes,
    pub revenue: Vec<RevenueDecomposition>,
    pub welfare: Vec<WelfareDecomposition>,
    /// Percent change in world shifted profits.
    pub ps_world_pct: f64,
    pub residual: f64,
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub equilibrium: Option<Equilibrium>,
}

pub fn run_scenario(
    world: &WorldCalibration,
    base: &Equilibrium,
    spec: &ScenarioSpec,
    mode: Mode,
) -> Result<ReformResult> {
    let (w_cf, r_cf) = spec.apply(world, &base.regime)?;
    let (hat, cf) = solve_counterfactual(base, &w_cf, &r_cf, mode)?;
    let revenue = decompose_tax_revenue(base, &cf, &w_cf, &r_cf)?;
    let welfare = decompose_welfare(base, &cf, world, &w_cf, &revenue);
    let ps0 = base.shifted_world();
    Ok(ReformResult {
        id: spec.id(),
        scenario: spec.clone(),
        mode,
        regime: r_cf,
        variant: if world.elasticities.shape_k == 0.0 { "constant".into() } else { "variable".into() },
        outcomes: aggregate_outcomes(base, &cf),
        revenue,
        welfare,
        ps_world_pct: if ps0 > 0.0 { 100.0 * (cf.shifted_world() / ps0 - 1.0) } else { 0.0 },
        residual: hat.residual,
        warnings: hat.warnings,
        equilibrium: Some(cf),
    })
}

/// Runs independent scenarios in parallel; failures stay in place.
pub fn run_grid(
    world: &WorldCalibration,
    base: &Equilibrium,
    specs: &[ScenarioSpec],
    modes: &[Mode],
) -> Vec<(ScenarioSpec, Mode, Result<ReformResult>)> {
    let jobs: Vec<(ScenarioSpec, Mode)> =
        specs.iter().flat_map(|s| modes.iter().map(move |m| (s.clone(), *m))).collect();
    jobs.into_par_iter()
        .map(|(s, m)| {
            let r = run_scenario(world, base, &s, m);
            (s, m, r)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NashRow {
    pub country: usize,
    pub alpha: f64,
    /// Calibration hit the nonnegativity bound.
    pub corner: bool,
    /// `d ln U / dt` and `d ln(B/P) / dt` at the evaluation point.
    pub dlog_welfare: f64,
    pub dlog_revenue: f64,
    /// `d ln Ũ / dt` with the exponent applied.
    pub derivative: f64,
    /// Second difference of `ln Ũ`; positive means not locally concave.
    pub curvature: f64,
    pub concave: bool,
}

pub const NASH_STEP: f64 = 0.001;

struct Probe {
    ln_u: [f64; 3],
    ln_b: [f64; 3],
}

fn probe(world: &WorldCalibration, base: &Equilibrium, regime: &TaxRegime, mode: Mode, k: usize) -> Result<Probe> {
    let mut ln_u = [0.0; 3];
    let mut ln_b = [0.0; 3];
    for (slot, dt) in [-NASH_STEP, 0.0, NASH_STEP].into_iter().enumerate() {
        let mut w = world.clone();
        w.tax_domestic[k] += dt;
        let (_, cf) = solve_counterfactual(base, &w, regime, mode)?;
        ln_u[slot] = (cf.expenditure[k] / cf.price[k]).ln();
        ln_b[slot] = (cf.revenue[k] / cf.price[k]).ln();
    }
    Ok(Probe { ln_u, ln_b })
}

/// Own-rate derivatives of the government objective for each non-haven.
/// With `alphas = None` the exponents are calibrated so the derivative is
/// zero at the evaluation point; otherwise the given exponents are used.
/// The evaluation point is `world` under `regime`, reached from `base`.
pub fn nash_deviation_scan(
    world: &WorldCalibration,
    base: &Equilibrium,
    regime: &TaxRegime,
    mode: Mode,
    alphas: Option<&[f64]>,
) -> Result<Vec<NashRow>> {
    let c = &world.countries;
    c.non_havens()
        .into_par_iter()
        .map(|k| {
            let p = probe(world, base, regime, mode, k)?;
            let du = (p.ln_u[2] - p.ln_u[0]) / (2.0 * NASH_STEP);
            let db = (p.ln_b[2] - p.ln_b[0]) / (2.0 * NASH_STEP);
            let (alpha, corner) = match alphas {
                Some(a) => (a[k], false),
                None => {
                    let a = -du / db;
                    if a.is_finite() && a >= 0.0 {
                        (a, false)
                    } else {
                        (0.0, true)
                    }
                }
            };
            let obj = |s: usize| alpha * p.ln_b[s] + p.ln_u[s];
            let derivative = (obj(2) - obj(0)) / (2.0 * NASH_STEP);
            let curvature = (obj(2) - 2.0 * obj(1) + obj(0)) / (NASH_STEP * NASH_STEP);
            Ok(NashRow {
                country: k,
                alpha,
                corner,
                dlog_welfare: du,
                dlog_revenue: db,
                derivative,
                curvature,
                concave: curvature < 0.0,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equilibrium::solve_baseline;
    use crate::regime::TaxingRights;

    fn world() -> WorldCalibration {
        let mut w = WorldCalibration::symmetric(&[false, false, false, true, true], 1.2);
        w.labor = vec![3.0, 1.0, 2.0, 0.3, 0.2];
        w.firm_mass = w.labor.clone();
        w.tax_domestic = vec![0.3, 0.2, 0.25, 0.05, 0.0];
        w.tax_haven = vec![0.05, 0.0];
        w
    }

    #[test]
    fn noop_is_zero() {
        let w = world();
        let base = solve_baseline(&w, &TaxRegime::Territorial).unwrap();
        let r = run_scenario(&w, &base, &ScenarioSpec::Noop, Mode::ShortRun).unwrap();
        assert!(r.outcomes.revenue.iter().all(|v| v.abs() < 1e-8));
        assert!(r.revenue.iter().all(|d| d.pe_zero));
        for d in &r.welfare {
            assert!(d.w_pe.abs() < 1e-12 && d.w_ge.abs() < 1e-8 && d.wage_ge.abs() < 1e-8);
        }
    }

    #[test]
    fn closing_the_only_haven_is_ending_shifting() {
        let mut w = WorldCalibration::symmetric(&[false, false, true], 1.2);
        w.labor = vec![2.0, 1.0, 0.3];
        w.firm_mass = w.labor.clone();
        let base = solve_baseline(&w, &TaxRegime::Territorial).unwrap();
        let a = run_scenario(&w, &base, &ScenarioSpec::CloseHaven { haven: 2 }, Mode::ShortRun).unwrap();
        let b = run_scenario(&w, &base, &ScenarioSpec::EndProfitShifting { scope: Scope::Multilateral }, Mode::ShortRun).unwrap();
        assert_eq!(a.outcomes, b.outcomes);
    }

    #[test]
    fn no_shifting_means_no_shifting_effect() {
        let mut w = world();
        w.ps_frictions.fill(f64::INFINITY);
        let base = solve_baseline(&w, &TaxRegime::Territorial).unwrap();
        let spec = ScenarioSpec::UnilateralRateChange { country: 0, relative: -0.05, absolute: 0.0 };
        let r = run_scenario(&w, &base, &spec, Mode::ShortRun).unwrap();
        assert!(r.revenue.iter().all(|d| d.ps_effect.abs() < 1e-12));
    }

    #[test]
    fn shifting_margin_dead_makes_min_tax_vacuous() {
        let w = world();
        let base = solve_baseline(&w, &TaxRegime::Territorial).unwrap();
        let (dead, _) = ScenarioSpec::EndProfitShifting { scope: Scope::Multilateral }.apply(&w, &TaxRegime::Territorial).unwrap();
        let (_, end) = solve_counterfactual(&base, &dead, &TaxRegime::Territorial, Mode::ShortRun).unwrap();
        let m = TaxRegime::MinTax(MinTax::new(0.15, TaxingRights::Residence, Scope::Multilateral));
        let (_, both) = solve_counterfactual(&base, &dead, &m, Mode::ShortRun).unwrap();
        for k in 0..5 {
            assert!((end.wages[k] / both.wages[k] - 1.0).abs() < 1e-10);
            assert!((end.revenue[k] - both.revenue[k]).abs() < 1e-10 * end.revenue[k].max(1.0));
        }
    }

    #[test]
    fn closing_a_haven_favors_the_cheaper_remaining_haven() {
        let mut w = WorldCalibration::symmetric(&[false, false, true, true, true], 1.2);
        w.labor = vec![2.0, 1.0, 0.3, 0.3, 0.3];
        w.firm_mass = w.labor.clone();
        w.tax_haven = vec![0.02; 3];
        for l in 0..2 {
            w.ps_frictions[(l, 0)] = 1.1;
            w.ps_frictions[(l, 1)] = 1.15;
            w.ps_frictions[(l, 2)] = 1.12;
        }
        let base = solve_baseline(&w, &TaxRegime::Territorial).unwrap();
        let r = run_scenario(&w, &base, &ScenarioSpec::CloseHaven { haven: 2 }, Mode::ShortRun).unwrap();
        let cf = r.equilibrium.unwrap();
        let gain = |j: usize| cf.shifted_by_residence_haven().column(j).sum() - base.shifted_by_residence_haven().column(j).sum();
        // Remaining havens 3 (α 1.15) and 4 (α 1.12): the cheaper one gains more.
        assert!(gain(2) > gain(1) && gain(1) > 0.0);
    }

    #[test]
    fn revenue_identity_and_welfare_accounting() {
        let w = world();
        for mode in [Mode::ShortRun, Mode::LongRun] {
            let (wc, base) = crate::equilibrium::calibrate_entry(&w, &TaxRegime::Territorial).unwrap();
            let spec = ScenarioSpec::MinTax(MinTax::new(0.15, TaxingRights::Residence, Scope::Multilateral));
            let r = run_scenario(&wc, &base, &spec, mode).unwrap();
            for d in &r.revenue {
                if !d.pe_zero {
                    let lhs = d.general - d.base;
                    let rhs = (d.partial - d.base) * (1.0 + d.ps_effect + d.real_effect);
                    assert!((lhs - rhs).abs() <= 1e-10 * d.base.abs().max(1.0));
                }
            }
            for d in &r.welfare {
                assert_eq!(d.wage_pe, 0.0);
                assert!((d.w_ge - d.w_pe - d.contributions()).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_exponent_scores_real_income_only() {
        let w = world();
        let base = solve_baseline(&w, &TaxRegime::Territorial).unwrap();
        let rows = nash_deviation_scan(&w, &base, &base.regime, Mode::ShortRun, Some(&[0.0; 5])).unwrap();
        assert_eq!(rows.len(), 3);
        for r in rows {
            assert_eq!(r.derivative, r.dlog_welfare);
        }
    }

    #[test]
    fn calibrated_exponents_make_the_baseline_a_local_rest_point() {
        let w = world();
        let base = solve_baseline(&w, &TaxRegime::Territorial).unwrap();
        let cal = nash_deviation_scan(&w, &base, &base.regime, Mode::ShortRun, None).unwrap();
        let mut alphas = vec![0.0; 5];
        for r in &cal {
            alphas[r.country] = r.alpha;
        }
        let check = nash_deviation_scan(&w, &base, &base.regime, Mode::ShortRun, Some(&alphas)).unwrap();
        for (c, r) in cal.iter().zip(&check) {
            if !c.corner {
                assert!(r.derivative.abs() <= 1e-6, "{r:?}");
            }
        }
    }
}
