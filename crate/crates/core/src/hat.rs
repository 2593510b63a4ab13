//! Counterfactuals in proportional changes around a solved equilibrium.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::choice::variable_elasticity_frictions;
use crate::equilibrium::{Equilibrium, Mode};
use crate::error::{ModelError, Result};
use crate::numerics::{log_sum_exp, solve_system, SolverOptions};
use crate::regime::{RateTable, TaxRegime};
use crate::tensor::Tensor3;
use crate::world::{validate_world, WorldCalibration};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HatState {
    pub mode: Mode,
    pub w_hat: Vec<f64>,
    pub y_hat: Vec<f64>,
    pub p_hat: Vec<f64>,
    pub n_hat: Vec<f64>,
    pub xi_hat: Vec<f64>,
    /// Counterfactual choice probabilities.
    pub prob: Tensor3,
    /// Counterfactual `X'_ilo / X'_i`.
    pub beta: Tensor3,
    /// Counterfactual destination shares, rows are sources.
    #[serde(with = "crate::serde_inf::matrix")]
    pub mu: DMatrix<f64>,
    pub iterations: usize,
    pub residual: f64,
    pub trace: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Base-equilibrium quantities the hat system reads.
struct Base<'a> {
    eq: &'a Equilibrium,
    mu: DMatrix<f64>,
    /// Import shares `X_ln / Y_n`, rows are sources.
    lambda: DMatrix<f64>,
    /// `ln N̂` pieces that do not depend on the general-equilibrium state.
    tax_shift: Tensor3,
}

struct Counterfactual {
    log_xi_hat: Vec<f64>,
    prob: Tensor3,
    log_g_hat: Vec<f64>,
    sales: Tensor3,
    pretax: Tensor3,
    production: Vec<f64>,
    revenue: Vec<f64>,
    profit: Vec<f64>,
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

    /// (ln ŵ, ln Ŷ, ln P̂, ln N̂)
    fn unpack(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = self.n;
        let mut p = vec![0.0; n];
        let mut it = x[2 * n..3 * n - 1].iter();
        for (k, pk) in p.iter_mut().enumerate() {
            if k != self.numeraire {
                *pk = *it.next().expect("layout");
            }
        }
        let nm = if self.entry { x[3 * n - 1..].to_vec() } else { vec![0.0; n] };
        (x[..n].to_vec(), x[n..2 * n].to_vec(), p, nm)
    }
}

fn evaluate(
    world: &WorldCalibration,
    base: &Base,
    rates: &RateTable,
    lw: &[f64],
    ly: &[f64],
    lp: &[f64],
    ln_mass: &[f64],
) -> Result<Counterfactual> {
    let eq = base.eq;
    let el = &world.elasticities;
    let n = eq.n();
    let opts = eq.prob.options;
    let s1 = 1.0 - el.sigma;
    let v1 = el.upsilon1;
    let rho = el.rho();
    let log_xi_hat: Vec<f64> = (0..n)
        .map(|l| {
            let terms = (0..n).map(|m| base.mu[(l, m)].ln() + ly[m] - s1 * lp[m]);
            log_sum_exp(terms) / s1
        })
        .collect();
    let mut prob = Tensor3::zeros(n, opts - 1);
    let mut log_g_hat = vec![0.0; n];
    for i in 0..n {
        let mut own = Vec::with_capacity(n);
        let mut nest = Vec::with_capacity(n * (opts - 1));
        let mut log_nhat = vec![f64::NEG_INFINITY; n * opts];
        for l in 0..n {
            let gen = -v1 * (lw[l] + log_xi_hat[l]);
            for o in 0..opts {
                let p = eq.prob.get(i, l, o);
                let shift = base.tax_shift.get(i, l, o);
                if p == 0.0 || shift == f64::NEG_INFINITY {
                    continue;
                }
                let v = if o == 0 { gen + shift } else { rho * (gen + shift) };
                log_nhat[l * opts + o] = v;
                if o == 0 {
                    own.push(p.ln() + v);
                } else {
                    nest.push(p.ln() + v);
                }
            }
        }
        let s = eq.nest_share[i];
        // M̂ = Σ (P/S) N̂ over the nest.
        let log_m_hat = if s > 0.0 { log_sum_exp(nest.iter().copied()) - s.ln() } else { f64::NEG_INFINITY };
        let log_nest = if log_m_hat == f64::NEG_INFINITY { log_m_hat } else { s.ln() + log_m_hat / rho };
        let lg = log_sum_exp(own.iter().copied().chain(std::iter::once(log_nest)));
        if !lg.is_finite() {
            return Err(ModelError::NonFinite("counterfactual denominators"));
        }
        log_g_hat[i] = lg;
        for l in 0..n {
            for o in 0..opts {
                let v = log_nhat[l * opts + o];
                if v == f64::NEG_INFINITY {
                    continue;
                }
                let lp_new = eq.prob.get(i, l, o).ln() + v - lg + if o == 0 { 0.0 } else { (1.0 / rho - 1.0) * log_m_hat };
                prob.set(i, l, o, lp_new.exp());
            }
        }
    }
    let e = (el.sigma - 1.0) / v1;
    let profit: Vec<f64> = (0..n).map(|i| eq.expected_profit[i] * (e * log_g_hat[i]).exp()).collect();
    let mut sales = Tensor3::zeros(n, opts - 1);
    let mut pretax = sales.clone();
    let mut production = vec![0.0; n];
    for i in 0..n {
        let mass = eq.firm_mass[i] * ln_mass[i].exp();
        for l in 0..n {
            for o in 0..opts {
                let p = prob.get(i, l, o);
                if p == 0.0 {
                    continue;
                }
                // Same accounting as the levels model, scaled by the hats.
                let pre = mass * p * profit[i] / (1.0 - rates.total.get(i, l, o));
                pretax.set(i, l, o, pre);
                let x = el.sigma * pre / world.wedge[l];
                sales.set(i, l, o, x);
                production[l] += x;
            }
        }
    }
    let revenue = rates.revenue(&pretax);
    Ok(Counterfactual { log_xi_hat, prob, log_g_hat, sales, pretax, production, revenue, profit })
}

fn residual_vector(
    world: &WorldCalibration,
    base: &Base,
    rates: &RateTable,
    layout: &Layout,
    x: &[f64],
) -> Result<Vec<f64>> {
    let eq = base.eq;
    let (lw, ly, lp, lm) = layout.unpack(x);
    let cf = evaluate(world, base, rates, &lw, &ly, &lp, &lm)?;
    let n = layout.n;
    let sig = world.elasticities.sigma;
    let s1 = 1.0 - sig;
    let mut r = Vec::with_capacity(layout.len());
    let w: Vec<f64> = (0..n).map(|k| eq.wages[k] * lw[k].exp()).collect();
    let mass: Vec<f64> = (0..n).map(|k| eq.firm_mass[k] * lm[k].exp()).collect();
    for k in 0..n {
        let variable = (sig - 1.0) / sig * cf.production[k];
        let target = if layout.entry {
            (mass[k] * cf.profit[k] + variable) / world.labor[k]
        } else {
            let free = world.labor[k] - mass[k] * world.entry_cost[k];
            if free <= 0.0 {
                return Err(ModelError::LaborInfeasible(k));
            }
            variable / free
        };
        r.push(w[k].ln() - target.ln());
    }
    for k in 0..n {
        let y = w[k] * world.labor[k]
            + cf.revenue[k]
            + mass[k] * (cf.profit[k] - world.entry_cost[k] * w[k])
            + (1.0 - world.wedge[k]) * cf.production[k] / sig
            + world.imbalances[k];
        if !(y > 0.0) {
            return Err(ModelError::NegativeExpenditure(k));
        }
        r.push(ly[k] - (y / eq.expenditure[k]).ln());
    }
    for m in (0..n).filter(|m| *m != layout.numeraire) {
        let terms = (0..n).filter(|l| base.lambda[(*l, m)] > 0.0).map(|l| {
            base.lambda[(l, m)].ln() - s1 * cf.log_xi_hat[l] + (cf.production[l] / eq.production[l]).ln()
        });
        r.push(lp[m] - log_sum_exp(terms) / s1);
    }
    if layout.entry {
        r.extend((0..n).map(|k| (world.entry_cost[k] * w[k]).ln() - cf.profit[k].ln()));
    }
    if r.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite("counterfactual residuals"));
    }
    Ok(r)
}

/// Solves the counterfactual for `world_cf` (the base world with edited
/// taxes or shifting frictions) under `regime_cf`.
pub fn solve_counterfactual(
    base: &Equilibrium,
    world_cf: &WorldCalibration,
    regime_cf: &TaxRegime,
    mode: Mode,
) -> Result<(HatState, Equilibrium)> {
    solve_counterfactual_with(base, world_cf, regime_cf, mode, &SolverOptions::default())
}

pub fn solve_counterfactual_with(
    base: &Equilibrium,
    world_cf: &WorldCalibration,
    regime_cf: &TaxRegime,
    mode: Mode,
    opts: &SolverOptions,
) -> Result<(HatState, Equilibrium)> {
    let violations = validate_world(world_cf);
    if !violations.is_empty() {
        return Err(ModelError::InvalidWorld(violations));
    }
    let n = base.n();
    if world_cf.n() != n || world_cf.h() != base.prob.havens() {
        return Err(ModelError::Dimension("counterfactual world does not match base equilibrium".into()));
    }
    let el = &world_cf.elasticities;
    let rates = RateTable::build(world_cf, regime_cf)?;
    let frictions = variable_elasticity_frictions(world_cf, &rates);
    let te = el.tax_exponent();
    let mut warnings = Vec::new();
    let mut tax_shift = Tensor3::zeros(n, base.prob.havens());
    for i in 0..n {
        for l in 0..n {
            for o in 0..tax_shift.options {
                let k = tax_shift.idx(i, l, o);
                let dt = (1.0 - rates.total.data[k]).ln() - (1.0 - base.rates.total.data[k]).ln();
                let da = if o == 0 { 0.0 } else { frictions.data[k].ln() - base.frictions.data[k].ln() };
                let v = te * dt - el.upsilon1 * da;
                tax_shift.data[k] = if v.is_nan() { f64::NEG_INFINITY } else { v };
                if o > 0 && base.prob.data[k] == 0.0 && frictions.data[k].is_finite() && !base.frictions.data[k].is_finite() {
                    warnings.push(format!("link ({i}, {l}, {o}) closed in the base cannot reopen in proportional changes"));
                }
            }
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    let mu = DMatrix::from_fn(n, n, |l, m| base.trade[(l, m)] / base.production[l]);
    let lambda = DMatrix::from_fn(n, n, |l, m| base.trade[(l, m)] / base.trade.column(m).sum());
    let b = Base { eq: base, mu, lambda, tax_shift };
    let layout = Layout { n, numeraire: world_cf.countries.numeraire, entry: mode == Mode::LongRun };
    let x0 = vec![0.0; layout.len()];
    let report = solve_system(
        "counterfactual",
        &x0,
        |x| residual_vector(world_cf, &b, &rates, &layout, x),
        opts,
    )?;
    let (lw, ly, lp, lm) = layout.unpack(&report.x);
    let cf = evaluate(world_cf, &b, &rates, &lw, &ly, &lp, &lm)?;
    let exp = |v: &[f64]| v.iter().map(|x| x.exp()).collect::<Vec<f64>>();
    let (w_hat, y_hat, p_hat, n_hat, xi_hat) = (exp(&lw), exp(&ly), exp(&lp), exp(&lm), exp(&cf.log_xi_hat));
    let s1 = 1.0 - el.sigma;
    let mu_cf = DMatrix::from_fn(n, n, |l, m| {
        b.mu[(l, m)] * (ly[m] - s1 * lp[m] - s1 * cf.log_xi_hat[l]).exp()
    });
    let trade = DMatrix::from_fn(n, n, |l, m| mu_cf[(l, m)] * cf.production[l]);
    let mut beta = cf.sales.clone();
    for i in 0..n {
        let t = cf.sales.residence_total(i);
        for l in 0..n {
            for o in 0..beta.options {
                let k = beta.idx(i, l, o);
                beta.data[k] = if t > 0.0 { cf.sales.data[k] / t } else { 0.0 };
            }
        }
    }
    let nest_share: Vec<f64> = (0..n).map(|i| (0..n).map(|l| cf.prob.cell(i, l)[1..].iter().sum::<f64>()).sum()).collect();
    // Nothing moved: keep the stored base flows rather than their re-evaluation.
    if rates == base.rates && frictions == base.frictions && report.x.iter().all(|v| *v == 0.0) {
        let eq_cf = Equilibrium { mode, regime: regime_cf.clone(), iterations: report.iterations, residual: report.residual, ..base.clone() };
        let hat = HatState {
            mode,
            w_hat,
            y_hat,
            p_hat,
            n_hat,
            xi_hat: vec![1.0; n],
            prob: base.prob.clone(),
            beta,
            mu: b.mu.clone(),
            iterations: report.iterations,
            residual: report.residual,
            trace: report.trace,
            warnings,
        };
        return Ok((hat, eq_cf));
    }
    let eq_cf = Equilibrium {
        mode,
        regime: regime_cf.clone(),
        wages: (0..n).map(|k| base.wages[k] * w_hat[k]).collect(),
        expenditure: (0..n).map(|k| base.expenditure[k] * y_hat[k]).collect(),
        price: (0..n).map(|k| base.price[k] * p_hat[k]).collect(),
        market_potential: (0..n).map(|k| base.market_potential[k] * xi_hat[k]).collect(),
        firm_mass: (0..n).map(|k| base.firm_mass[k] * n_hat[k]).collect(),
        expected_profit: cf.profit,
        production: cf.production,
        revenue: cf.revenue,
        prob: cf.prob.clone(),
        sales: cf.sales,
        pretax: cf.pretax,
        trade,
        nest_share,
        log_g: (0..n).map(|i| base.log_g[i] + cf.log_g_hat[i]).collect(),
        rates,
        frictions,
        iterations: report.iterations,
        residual: report.residual,
    };
    let hat = HatState {
        mode,
        w_hat,
        y_hat,
        p_hat,
        n_hat,
        xi_hat,
        prob: cf.prob,
        beta,
        mu: mu_cf,
        iterations: report.iterations,
        residual: report.residual,
        trace: report.trace,
        warnings,
    };
    Ok((hat, eq_cf))
}

/// Percentage changes per country between two equilibria.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcomes {
    pub revenue: Vec<f64>,
    /// Profits shifted out of each source.
    pub shifted: Vec<f64>,
    pub production: Vec<f64>,
    pub welfare: Vec<f64>,
    pub wages: Vec<f64>,
    pub firm_mass: Vec<f64>,
}

fn pct(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter()
        .zip(b)
        .map(|(x, y)| if *x == 0.0 { if *y == 0.0 { 0.0 } else { f64::INFINITY } } else { 100.0 * (y / x - 1.0) })
        .collect()
}

pub fn aggregate_outcomes(eq: &Equilibrium, cf: &Equilibrium) -> Outcomes {
    Outcomes {
        revenue: pct(&eq.revenue, &cf.revenue),
        shifted: pct(&eq.shifted_by_source(), &cf.shifted_by_source()),
        production: pct(&eq.production, &cf.production),
        welfare: pct(&eq.welfare(), &cf.welfare()),
        wages: pct(&eq.wages, &cf.wages),
        firm_mass: pct(&eq.firm_mass, &cf.firm_mass),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equilibrium::{residuals, solve_baseline, solve_equilibrium};

    fn world() -> WorldCalibration {
        let mut w = WorldCalibration::symmetric(&[false, false, false, true, true], 1.3);
        w.labor = vec![3.0, 1.0, 2.0, 0.3, 0.2];
        w.tech = vec![1.0, 1.2, 0.9, 0.8, 0.7];
        w.tax_domestic = vec![0.3, 0.2, 0.25, 0.05, 0.0];
        w.tax_haven = vec![0.02, 0.05];
        w.wedge = vec![1.1, 0.9, 1.0, 1.0, 1.0];
        w.firm_mass = vec![3.0, 1.0, 2.0, 0.3, 0.2];
        w.ps_frictions[(1, 1)] = 1.25;
        w.aggressiveness[2] *= 1.02;
        w
    }

    #[test]
    fn no_change_gives_unit_hats() {
        let w = world();
        let base = solve_baseline(&w, &TaxRegime::Territorial).unwrap();
        let (hat, _) = solve_counterfactual(&base, &w, &TaxRegime::Territorial, Mode::ShortRun).unwrap();
        for v in hat.w_hat.iter().chain(&hat.y_hat).chain(&hat.p_hat).chain(&hat.xi_hat) {
            assert!((v - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn hats_agree_with_levels_resolve() {
        let w = world();
        let base = solve_baseline(&w, &TaxRegime::Territorial).unwrap();
        let mut w2 = w.clone();
        w2.tax_domestic[0] = 0.25;
        for mode in [Mode::ShortRun, Mode::LongRun] {
            let (_, cf) = solve_counterfactual(&base, &w2, &TaxRegime::Territorial, mode).unwrap();
            let levels = solve_equilibrium(&w2, &TaxRegime::Territorial, mode).unwrap();
            for k in 0..5 {
                assert!((cf.wages[k] / levels.wages[k] - 1.0).abs() < 1e-9);
                assert!((cf.production[k] / levels.production[k] - 1.0).abs() < 1e-9);
                assert!((cf.firm_mass[k] / levels.firm_mass[k] - 1.0).abs() < 1e-9);
            }
            assert!(residuals(&w2, &cf).unwrap().max() <= 1e-9);
        }
    }

    #[test]
    fn closing_links_zeroes_their_flows() {
        let w = world();
        let base = solve_baseline(&w, &TaxRegime::Territorial).unwrap();
        let mut w2 = w.clone();
        w2.ps_frictions.column_mut(0).fill(f64::INFINITY);
        let (_, cf) = solve_counterfactual(&base, &w2, &TaxRegime::Territorial, Mode::ShortRun).unwrap();
        assert_eq!(cf.shifted_by_source_haven().column(0).sum(), 0.0);
        assert!(residuals(&w2, &cf).unwrap().max() <= 1e-9);
    }

    #[test]
    fn unchanged_outcomes_are_zero() {
        let w = world();
        let base = solve_baseline(&w, &TaxRegime::Territorial).unwrap();
        let o = aggregate_outcomes(&base, &base);
        assert!(o.revenue.iter().chain(&o.welfare).all(|v| *v == 0.0));
    }
}
