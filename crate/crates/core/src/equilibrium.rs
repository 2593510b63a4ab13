//! Levels equilibrium: labor clearing, budgets, price indices and, in the
//! long run, free entry.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::choice::{destination_shares, expected_profits, log_numerators, probabilities_from_numerators, variable_elasticity_frictions};
use crate::error::{ModelError, Result};
use crate::numerics::{log_sum_exp, solve_system, SolverOptions};
use crate::regime::{RateTable, TaxRegime};
use crate::tensor::Tensor3;
use crate::world::{validate_world, WorldCalibration};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Firm masses fixed.
    ShortRun,
    /// Firm masses adjust until expected profit covers entry cost.
    LongRun,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Equilibrium {
    pub mode: Mode,
    pub regime: TaxRegime,
    pub wages: Vec<f64>,
    pub expenditure: Vec<f64>,
    pub price: Vec<f64>,
    pub market_potential: Vec<f64>,
    pub firm_mass: Vec<f64>,
    pub expected_profit: Vec<f64>,
    pub production: Vec<f64>,
    pub revenue: Vec<f64>,
    pub prob: Tensor3,
    /// Sales `X_ilo` by residence, source and booking option.
    pub sales: Tensor3,
    /// Pre-tax booked profits per cell.
    pub pretax: Tensor3,
    /// Bilateral trade `X_ln`, rows are sources.
    #[serde(with = "crate::serde_inf::matrix")]
    pub trade: DMatrix<f64>,
    pub nest_share: Vec<f64>,
    pub log_g: Vec<f64>,
    pub rates: RateTable,
    /// Shifting frictions in force (variable-elasticity adjusted).
    pub frictions: Tensor3,
    pub iterations: usize,
    pub residual: f64,
}

impl Equilibrium {
    pub fn n(&self) -> usize {
        self.wages.len()
    }

    pub fn welfare(&self) -> Vec<f64> {
        self.expenditure.iter().zip(&self.price).map(|(y, p)| y / p).collect()
    }

    /// Pre-tax profits booked in havens, by source.
    pub fn shifted_by_source(&self) -> Vec<f64> {
        let t = &self.pretax;
        (0..t.n).map(|l| (0..t.n).map(|i| t.cell(i, l)[1..].iter().sum::<f64>()).sum()).collect()
    }

    /// Pre-tax profits booked in havens, by residence.
    pub fn shifted_by_residence(&self) -> Vec<f64> {
        let t = &self.pretax;
        (0..t.n).map(|i| (0..t.n).map(|l| t.cell(i, l)[1..].iter().sum::<f64>()).sum()).collect()
    }

    /// Residence × haven-slot shifted profits.
    pub fn shifted_by_residence_haven(&self) -> DMatrix<f64> {
        let t = &self.pretax;
        DMatrix::from_fn(t.n, t.havens(), |i, j| (0..t.n).map(|l| t.get(i, l, j + 1)).sum())
    }

    /// Source × haven-slot shifted profits.
    pub fn shifted_by_source_haven(&self) -> DMatrix<f64> {
        let t = &self.pretax;
        DMatrix::from_fn(t.n, t.havens(), |l, j| (0..t.n).map(|i| t.get(i, l, j + 1)).sum())
    }

    pub fn shifted_world(&self) -> f64 {
        self.shifted_by_source().iter().sum()
    }

    /// Pre-tax profits booked where they are produced, by source.
    pub fn reported_by_source(&self) -> Vec<f64> {
        let t = &self.pretax;
        (0..t.n).map(|l| (0..t.n).map(|i| t.get(i, l, 0)).sum()).collect()
    }
}

/// Which labor and budget closure the solver uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Closure {
    Fixed,
    FreeEntry,
    /// Free-entry labor demand with N held fixed; entry costs are set
    /// afterwards so the point is also a long-run equilibrium.
    Calibrate,
}

/// Everything implied by (w, Y, P, N) for a world and regime.
pub(crate) struct Snapshot {
    pub log_xi: Vec<f64>,
    pub prob: Tensor3,
    pub log_g: Vec<f64>,
    pub nest_share: Vec<f64>,
    pub profit: Vec<f64>,
    pub sales: Tensor3,
    pub pretax: Tensor3,
    pub production: Vec<f64>,
    pub revenue: Vec<f64>,
}

pub(crate) fn snapshot(
    world: &WorldCalibration,
    rates: &RateTable,
    frictions: &Tensor3,
    wages: &[f64],
    expenditure: &[f64],
    price: &[f64],
    firm_mass: &[f64],
) -> Result<Snapshot> {
    let el = &world.elasticities;
    let (_, log_xi) = destination_shares(world, expenditure, price);
    let lx = log_numerators(world, rates, frictions, wages, &log_xi);
    let ch = probabilities_from_numerators(el, &world.aggressiveness, &lx)?;
    let profit = expected_profits(el, &ch.log_g)?;
    let n = world.n();
    let mut sales = Tensor3::zeros(n, ch.prob.havens());
    let mut pretax = sales.clone();
    let mut production = vec![0.0; n];
    for i in 0..n {
        let scale = firm_mass[i] * profit[i];
        for l in 0..n {
            for o in 0..sales.options {
                let p = ch.prob.get(i, l, o);
                if p == 0.0 {
                    continue;
                }
                let net = 1.0 - rates.total.get(i, l, o);
                let pre = scale * p / net;
                pretax.set(i, l, o, pre);
                let x = el.sigma * pre / world.wedge[l];
                sales.set(i, l, o, x);
                production[l] += x;
            }
        }
    }
    let revenue = rates.revenue(&pretax);
    Ok(Snapshot {
        log_xi,
        prob: ch.prob,
        log_g: ch.log_g,
        nest_share: ch.nest_share,
        profit,
        sales,
        pretax,
        production,
        revenue,
    })
}

/// `ln P_n` implied by the price-index equation at the snapshot.
fn implied_log_price(world: &WorldCalibration, s: &Snapshot) -> Vec<f64> {
    let n = world.n();
    let s1 = 1.0 - world.elasticities.sigma;
    (0..n)
        .map(|m| {
            let terms = (0..n).map(|l| s1 * world.trade_frictions[(l, m)].ln() - s1 * s.log_xi[l] + s.production[l].ln());
            log_sum_exp(terms) / s1
        })
        .collect()
}

fn labor_demand_wage(world: &WorldCalibration, s: &Snapshot, n_mass: &[f64], closure: Closure) -> Result<Vec<f64>> {
    let sig = world.elasticities.sigma;
    (0..world.n())
        .map(|k| {
            let variable = (sig - 1.0) / sig * s.production[k];
            match closure {
                Closure::Fixed => {
                    let free = world.labor[k] - n_mass[k] * world.entry_cost[k];
                    if free <= 0.0 {
                        return Err(ModelError::LaborInfeasible(k));
                    }
                    Ok(variable / free)
                }
                Closure::FreeEntry | Closure::Calibrate => {
                    Ok((n_mass[k] * s.profit[k] + variable) / world.labor[k])
                }
            }
        })
        .collect()
}

fn budget(world: &WorldCalibration, s: &Snapshot, n_mass: &[f64], wages: &[f64], closure: Closure) -> Result<Vec<f64>> {
    let sig = world.elasticities.sigma;
    (0..world.n())
        .map(|k| {
            let rent = match closure {
                Closure::Calibrate => 0.0,
                _ => n_mass[k] * (s.profit[k] - world.entry_cost[k] * wages[k]),
            };
            let y = wages[k] * world.labor[k]
                + s.revenue[k]
                + rent
                + (1.0 - world.wedge[k]) * s.production[k] / sig
                + world.imbalances[k];
            if !(y > 0.0) {
                return Err(ModelError::NegativeExpenditure(k));
            }
            Ok(y)
        })
        .collect()
}

struct Layout {
    n: usize,
    numeraire: usize,
    entry: bool,
}

impl Layout {
    fn len(&self) -> usize {
        3 * self.n - 1 + if self.entry { self.n } else { 0 }
    }

    fn pack(&self, w: &[f64], y: &[f64], p: &[f64], nm: &[f64]) -> Vec<f64> {
        let mut x: Vec<f64> = w.iter().chain(y).map(|v| v.ln()).collect();
        x.extend((0..self.n).filter(|k| *k != self.numeraire).map(|k| p[k].ln()));
        if self.entry {
            x.extend(nm.iter().map(|v| v.ln()));
        }
        x
    }

    fn unpack(&self, x: &[f64], nm_fixed: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = self.n;
        let w = x[..n].iter().map(|v| v.exp()).collect();
        let y = x[n..2 * n].iter().map(|v| v.exp()).collect();
        let mut p = vec![1.0; n];
        let mut it = x[2 * n..3 * n - 1].iter();
        for (k, pk) in p.iter_mut().enumerate() {
            if k != self.numeraire {
                *pk = it.next().expect("layout").exp();
            }
        }
        let nm = if self.entry { x[3 * n - 1..].iter().map(|v| v.exp()).collect() } else { nm_fixed.to_vec() };
        (w, y, p, nm)
    }
}

fn residual_vector(
    world: &WorldCalibration,
    rates: &RateTable,
    frictions: &Tensor3,
    layout: &Layout,
    closure: Closure,
    x: &[f64],
) -> Result<Vec<f64>> {
    let (w, y, p, nm) = layout.unpack(x, &world.firm_mass);
    let s = snapshot(world, rates, frictions, &w, &y, &p, &nm)?;
    let target_w = labor_demand_wage(world, &s, &nm, closure)?;
    let target_y = budget(world, &s, &nm, &w, closure)?;
    let target_p = implied_log_price(world, &s);
    let n = layout.n;
    let mut r = Vec::with_capacity(layout.len());
    r.extend((0..n).map(|k| w[k].ln() - target_w[k].ln()));
    r.extend((0..n).map(|k| y[k].ln() - target_y[k].ln()));
    r.extend((0..n).filter(|k| *k != layout.numeraire).map(|k| p[k].ln() - target_p[k]));
    if layout.entry {
        r.extend((0..n).map(|k| (world.entry_cost[k] * w[k]).ln() - s.profit[k].ln()));
    }
    if r.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite("equilibrium residuals"));
    }
    Ok(r)
}

/// Damped labor-market passes from unit wages so that small countries with
/// large demand do not start far below their market wage.
fn warm_start(world: &WorldCalibration, rates: &RateTable, frictions: &Tensor3, closure: Closure) -> (Vec<f64>, Vec<f64>) {
    let n = world.n();
    let p = vec![1.0; n];
    let mut w = vec![1.0; n];
    let mut y = world.labor.clone();
    for _ in 0..40 {
        let Ok(s) = snapshot(world, rates, frictions, &w, &y, &p, &world.firm_mass) else { break };
        let Ok(target) = labor_demand_wage(world, &s, &world.firm_mass, closure) else { break };
        if target.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            break;
        }
        let step = 1.0 / world.elasticities.sigma;
        w = target.iter().zip(&w).map(|(t, old)| old * (t / old).powf(step)).collect();
        y = w.iter().zip(&world.labor).map(|(w, l)| w * l).collect();
    }
    (w, y)
}

fn solve(world: &WorldCalibration, regime: &TaxRegime, closure: Closure, start: Option<&Equilibrium>, opts: &SolverOptions) -> Result<Equilibrium> {
    let violations = validate_world(world);
    if !violations.is_empty() {
        return Err(ModelError::InvalidWorld(violations));
    }
    let rates = RateTable::build(world, regime)?;
    let frictions = variable_elasticity_frictions(world, &rates);
    let n = world.n();
    let layout = Layout { n, numeraire: world.countries.numeraire, entry: closure == Closure::FreeEntry };
    let x0 = match start {
        Some(e) => layout.pack(&e.wages, &e.expenditure, &e.price, &e.firm_mass),
        None => {
            let unit = layout.pack(&vec![1.0; n], &world.labor, &vec![1.0; n], &world.firm_mass);
            let (w, y) = warm_start(world, &rates, &frictions, closure);
            let warm = layout.pack(&w, &y, &vec![1.0; n], &world.firm_mass);
            let norm = |x: &[f64]| {
                residual_vector(world, &rates, &frictions, &layout, closure, x)
                    .map(|r| r.iter().fold(0.0f64, |m, v| m.max(v.abs())))
                    .unwrap_or(f64::INFINITY)
            };
            if norm(&warm) < norm(&unit) { warm } else { unit }
        }
    };
    let report = solve_system(
        "equilibrium",
        &x0,
        |x| residual_vector(world, &rates, &frictions, &layout, closure, x),
        opts,
    )?;
    let (w, y, p, nm) = layout.unpack(&report.x, &world.firm_mass);
    let s = snapshot(world, &rates, &frictions, &w, &y, &p, &nm)?;
    let trade = trade_matrix(world, &s.log_xi, &y, &p, &s.production);
    Ok(Equilibrium {
        mode: if closure == Closure::FreeEntry { Mode::LongRun } else { Mode::ShortRun },
        regime: regime.clone(),
        market_potential: s.log_xi.iter().map(|v| v.exp()).collect(),
        wages: w,
        expenditure: y,
        price: p,
        firm_mass: nm,
        expected_profit: s.profit,
        production: s.production,
        revenue: s.revenue,
        prob: s.prob,
        sales: s.sales,
        pretax: s.pretax,
        trade,
        nest_share: s.nest_share,
        log_g: s.log_g,
        rates,
        frictions,
        iterations: report.iterations,
        residual: report.residual,
    })
}

pub(crate) fn trade_matrix(world: &WorldCalibration, log_xi: &[f64], y: &[f64], p: &[f64], q: &[f64]) -> DMatrix<f64> {
    let s1 = 1.0 - world.elasticities.sigma;
    let n = world.n();
    DMatrix::from_fn(n, n, |l, m| {
        (s1 * world.trade_frictions[(l, m)].ln() + y[m].ln() - s1 * p[m].ln() - s1 * log_xi[l] + q[l].ln()).exp()
    })
}

pub fn solve_equilibrium(world: &WorldCalibration, regime: &TaxRegime, mode: Mode) -> Result<Equilibrium> {
    solve_equilibrium_with(world, regime, mode, None, &SolverOptions::default())
}

pub fn solve_equilibrium_with(
    world: &WorldCalibration,
    regime: &TaxRegime,
    mode: Mode,
    start: Option<&Equilibrium>,
    opts: &SolverOptions,
) -> Result<Equilibrium> {
    let closure = match mode {
        Mode::ShortRun => Closure::Fixed,
        Mode::LongRun => Closure::FreeEntry,
    };
    let mut eq = solve(world, regime, closure, start, opts)?;
    eq.mode = mode;
    Ok(eq)
}

/// Short-run baseline.
pub fn solve_baseline(world: &WorldCalibration, regime: &TaxRegime) -> Result<Equilibrium> {
    solve_equilibrium(world, regime, Mode::ShortRun)
}

/// Solves with firm masses held at their world values and sets each
/// residence's entry cost to `π̄_i / w_i`, so the returned point is both a
/// short-run and a long-run equilibrium of the returned world.
pub fn calibrate_entry(world: &WorldCalibration, regime: &TaxRegime) -> Result<(WorldCalibration, Equilibrium)> {
    let mut eq = solve(world, regime, Closure::Calibrate, None, &SolverOptions::default())?;
    let mut out = world.clone();
    out.entry_cost = eq.expected_profit.iter().zip(&eq.wages).map(|(p, w)| p / w).collect();
    eq.mode = Mode::ShortRun;
    Ok((out, eq))
}

/// Relative residuals of every equilibrium condition at a stored point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    pub labor: f64,
    pub budget: f64,
    pub price: f64,
    pub entry: f64,
    /// Stored flows against flows recomputed from the state.
    pub flows: f64,
    /// `Σ_n X_ln = Q_l` and `Σ_l X_ln = Y_n`.
    pub goods: f64,
    /// World expenditure against world production plus imbalances.
    pub walras: f64,
}

impl Residuals {
    pub fn max(&self) -> f64 {
        [self.labor, self.budget, self.price, self.entry, self.flows, self.goods, self.walras]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

fn rel(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    if d == 0.0 {
        0.0
    } else {
        d / a.abs().max(b.abs())
    }
}

pub fn residuals(world: &WorldCalibration, eq: &Equilibrium) -> Result<Residuals> {
    let rates = RateTable::build(world, &eq.regime)?;
    let frictions = variable_elasticity_frictions(world, &rates);
    let s = snapshot(world, &rates, &frictions, &eq.wages, &eq.expenditure, &eq.price, &eq.firm_mass)?;
    let n = world.n();
    let sig = world.elasticities.sigma;
    let mut r = Residuals { labor: 0.0, budget: 0.0, price: 0.0, entry: 0.0, flows: 0.0, goods: 0.0, walras: 0.0 };
    let lp = implied_log_price(world, &s);
    for k in 0..n {
        let demand = eq.firm_mass[k] * world.entry_cost[k] * eq.wages[k] + (sig - 1.0) / sig * s.production[k];
        r.labor = r.labor.max(rel(eq.wages[k] * world.labor[k], demand));
        let y = eq.wages[k] * world.labor[k]
            + s.revenue[k]
            + eq.firm_mass[k] * (s.profit[k] - world.entry_cost[k] * eq.wages[k])
            + (1.0 - world.wedge[k]) * s.production[k] / sig
            + world.imbalances[k];
        r.budget = r.budget.max(rel(eq.expenditure[k], y));
        r.price = r.price.max(rel(eq.price[k], lp[k].exp()));
        if eq.mode == Mode::LongRun {
            r.entry = r.entry.max(rel(s.profit[k], world.entry_cost[k] * eq.wages[k]));
        }
        r.flows = r
            .flows
            .max(rel(eq.production[k], s.production[k]))
            .max(rel(eq.revenue[k], s.revenue[k]))
            .max(rel(eq.expected_profit[k], s.profit[k]));
        r.goods = r
            .goods
            .max(rel(eq.trade.row(k).sum(), eq.production[k]))
            .max(rel(eq.trade.column(k).sum(), eq.expenditure[k]));
    }
    let scale = eq.sales.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    r.flows = r.flows.max(eq.sales.max_abs_diff(&s.sales) / scale);
    let world_y: f64 = eq.expenditure.iter().sum();
    let world_q: f64 = eq.production.iter().sum::<f64>() + world.imbalances.iter().sum::<f64>();
    r.walras = rel(world_y, world_q);
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> WorldCalibration {
        let mut w = WorldCalibration::symmetric(&[false, false, false, true], 1.3);
        w.labor = vec![3.0, 1.0, 2.0, 0.3];
        w.tech = vec![1.0, 1.2, 0.9, 0.8];
        w.tax_domestic = vec![0.3, 0.2, 0.25, 0.05];
        w.wedge = vec![1.1, 0.9, 1.0, 1.0];
        w.firm_mass = vec![3.0, 1.0, 2.0, 0.3];
        w.imbalances = vec![0.02, -0.01, -0.01, 0.0];
        w
    }

    #[test]
    fn symmetric_world_has_equal_wages() {
        let mut w = WorldCalibration::symmetric(&[false, false, true], 1.3);
        w.countries.haven = vec![false, false, false];
        w.ps_frictions = DMatrix::zeros(3, 0);
        w.tax_haven.clear();
        w.tax_domestic = vec![0.2; 3];
        // Not a valid world (no haven), so drive the solver directly.
        let rates = RateTable::build(&w, &TaxRegime::Territorial).unwrap();
        let fr = variable_elasticity_frictions(&w, &rates);
        let layout = Layout { n: 3, numeraire: 0, entry: false };
        let x0 = layout.pack(&[1.0; 3], &[1.0; 3], &[1.0; 3], &w.firm_mass);
        let rep = solve_system("t", &x0, |x| residual_vector(&w, &rates, &fr, &layout, Closure::Fixed, x), &SolverOptions::default()).unwrap();
        let (wg, _, _, _) = layout.unpack(&rep.x, &w.firm_mass);
        assert!((wg[1] / wg[0] - 1.0).abs() < 1e-10 && (wg[2] / wg[0] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn baseline_residuals_vanish() {
        let w = world();
        let eq = solve_baseline(&w, &TaxRegime::Territorial).unwrap();
        let r = residuals(&w, &eq).unwrap();
        assert!(r.max() <= 1e-9, "{r:?}");
        assert_eq!(eq.price[0], 1.0);
    }

    #[test]
    fn long_run_residuals_vanish() {
        let w = world();
        let eq = solve_equilibrium(&w, &TaxRegime::Territorial, Mode::LongRun).unwrap();
        let r = residuals(&w, &eq).unwrap();
        assert!(r.max() <= 1e-9, "{r:?}");
    }

    #[test]
    fn zero_taxes_give_zero_revenue() {
        let mut w = world();
        w.tax_domestic = vec![0.0; 4];
        w.tax_haven = vec![0.0];
        let eq = solve_baseline(&w, &TaxRegime::Territorial).unwrap();
        assert!(eq.revenue.iter().all(|b| *b == 0.0));
        for k in 0..4 {
            let y = eq.wages[k] * w.labor[k]
                + eq.firm_mass[k] * (eq.expected_profit[k] - w.entry_cost[k] * eq.wages[k])
                + (1.0 - w.wedge[k]) * eq.production[k] / w.elasticities.sigma
                + w.imbalances[k];
            assert!((eq.expenditure[k] / y - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn calibrated_entry_is_long_run_consistent() {
        let w = world();
        let (w2, eq) = calibrate_entry(&w, &TaxRegime::Territorial).unwrap();
        let mut lr = eq.clone();
        lr.mode = Mode::LongRun;
        assert!(residuals(&w2, &lr).unwrap().max() <= 1e-9);
        let again = solve_equilibrium(&w2, &TaxRegime::Territorial, Mode::LongRun).unwrap();
        for k in 0..4 {
            assert!((again.firm_mass[k] / w.firm_mass[k] - 1.0).abs() < 1e-8);
        }
    }
}
