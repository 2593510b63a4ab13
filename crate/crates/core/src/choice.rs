//! Location and booking choice probabilities, expected profits, and the
//! share families derived from them. Everything runs in the log domain.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{ModelError, Result};
use crate::numerics::{ln_gamma, log_sum_exp};
use crate::regime::{RateTable, TaxRegime};
use crate::tensor::Tensor3;
use crate::world::{Elasticities, WorldCalibration};

/// `Σ_l x_l0 + θ^{-ν1} (Σ_{l, o≥1} x_lo^{ν2/ν1})^{ν1/ν2}` for one residence.
/// Rows of `x` are sources, column 0 is booking at the source.
pub fn correlation_function(x: &DMatrix<f64>, theta: f64, upsilon1: f64, upsilon2: f64) -> f64 {
    let rho = upsilon2 / upsilon1;
    let own: f64 = x.column(0).iter().sum();
    let nest: f64 = (0..x.nrows())
        .flat_map(|l| (1..x.ncols()).map(move |o| (l, o)))
        .map(|(l, o)| x[(l, o)].powf(rho))
        .sum();
    if nest == 0.0 {
        return own;
    }
    own + theta.powf(-upsilon1) * nest.powf(1.0 / rho)
}

/// Probabilities for every (i, l, o) with the per-residence aggregates.
#[derive(Debug, Clone, PartialEq)]
pub struct ChoiceTensor {
    pub prob: Tensor3,
    /// `ln G_i`, the correlation function at the residence's numerators.
    pub log_g: Vec<f64>,
    /// Probability mass of the shifting nest.
    pub nest_share: Vec<f64>,
    /// `ln Σ x^ρ` over the nest; `-inf` when the nest is empty.
    pub log_nest_sum: Vec<f64>,
}

/// Profit-shifting frictions actually faced by each (i, l, o ≥ 1) cell:
/// the base α, scaled by the tax-differential term under variable
/// elasticity. Column 0 is unused and set to 1.
pub fn variable_elasticity_frictions(world: &WorldCalibration, rates: &RateTable) -> Tensor3 {
    let c = &world.countries;
    let n = c.len();
    let el = &world.elasticities;
    let mut out = Tensor3::filled(n, c.n_havens(), f64::INFINITY);
    for i in 0..n {
        for l in 0..n {
            out.set(i, l, 0, 1.0);
            if c.is_haven(i) || c.is_haven(l) {
                continue;
            }
            for o in 1..out.options {
                let a = world.ps_frictions[(l, o - 1)];
                let v = if el.shape_k == 0.0 {
                    a
                } else {
                    let d = rates.ve.get(i, l, 0) - rates.ve.get(i, l, o);
                    if d <= 0.0 {
                        f64::INFINITY
                    } else {
                        a * d.powf(-el.shape_k / el.upsilon1)
                    }
                };
                out.set(i, l, o, v);
            }
        }
    }
    out
}

/// Partial elasticity of a shifted-profit share with respect to the net-of-tax
/// rate `1 - t_lh` in the variable-elasticity model.
pub fn implied_ps_elasticity(el: &Elasticities, t_source: f64, t_haven: f64) -> f64 {
    let base = el.upsilon2 / (el.sigma - 1.0) - 1.0;
    if el.shape_k == 0.0 {
        return base;
    }
    base + el.shape_k * el.upsilon2 / el.upsilon1 * (1.0 - t_haven) / (t_source - t_haven)
}

/// `ln x_ilo`: the log of the choice numerators before the nest transform.
pub fn log_numerators(
    world: &WorldCalibration,
    rates: &RateTable,
    frictions: &Tensor3,
    wages: &[f64],
    log_xi: &[f64],
) -> Tensor3 {
    let c = &world.countries;
    let n = c.len();
    let el = &world.elasticities;
    let v1 = el.upsilon1;
    let te = el.tax_exponent();
    let mut lx = Tensor3::filled(n, c.n_havens(), f64::NEG_INFINITY);
    let source_term: Vec<f64> = (0..n)
        .map(|l| world.tech[l].ln() - v1 * (wages[l].ln() + log_xi[l]) + te * world.wedge[l].ln())
        .collect();
    for i in 0..n {
        for l in 0..n {
            let g = world.mp_frictions[(i, l)];
            if !g.is_finite() {
                continue;
            }
            let base = source_term[l] - v1 * g.ln();
            for o in 0..lx.options {
                let a = if o == 0 { 1.0 } else { frictions.get(i, l, o) };
                if !a.is_finite() {
                    continue;
                }
                let v = base - v1 * a.ln() + te * (1.0 - rates.total.get(i, l, o)).ln();
                lx.set(i, l, o, v);
            }
        }
    }
    lx
}

/// Nested choice probabilities from log numerators and aggressiveness.
pub fn probabilities_from_numerators(el: &Elasticities, theta: &[f64], lx: &Tensor3) -> Result<ChoiceTensor> {
    let n = lx.n;
    let opts = lx.options;
    let rho = el.rho();
    let rows: Vec<(Vec<f64>, f64, f64, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let own = (0..n).map(|l| lx.get(i, l, 0));
            let nest_terms: Vec<f64> =
                (0..n).flat_map(|l| (1..opts).map(move |o| (l, o))).map(|(l, o)| rho * lx.get(i, l, o)).collect();
            let log_m = if theta[i].is_finite() { log_sum_exp(nest_terms.iter().copied()) } else { f64::NEG_INFINITY };
            let log_nest =
                if log_m == f64::NEG_INFINITY { log_m } else { -el.upsilon1 * theta[i].ln() + log_m / rho };
            let log_g = log_sum_exp(own.chain(std::iter::once(log_nest)));
            let mut row = vec![0.0; n * opts];
            for l in 0..n {
                row[l * opts] = (lx.get(i, l, 0) - log_g).exp();
                if log_m > f64::NEG_INFINITY {
                    for o in 1..opts {
                        row[l * opts + o] = (log_nest - log_g + rho * lx.get(i, l, o) - log_m).exp();
                    }
                }
            }
            let nest_share = (log_nest - log_g).exp();
            (row, log_g, nest_share, log_m)
        })
        .collect();
    let mut prob = Tensor3::zeros(n, opts - 1);
    let mut log_g = Vec::with_capacity(n);
    let mut nest_share = Vec::with_capacity(n);
    let mut log_nest_sum = Vec::with_capacity(n);
    for (i, (row, g, s, m)) in rows.into_iter().enumerate() {
        if !g.is_finite() || row.iter().any(|p| !p.is_finite()) {
            return Err(ModelError::NonFinite("choice denominators"));
        }
        let k = prob.idx(i, 0, 0);
        prob.data[k..k + n * opts].copy_from_slice(&row);
        log_g.push(g);
        nest_share.push(s);
        log_nest_sum.push(m);
    }
    Ok(ChoiceTensor { prob, log_g, nest_share, log_nest_sum })
}

pub fn choice_probabilities(
    world: &WorldCalibration,
    regime: &TaxRegime,
    wages: &[f64],
    xi: &[f64],
) -> Result<ChoiceTensor> {
    if wages.iter().chain(xi).any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(ModelError::Input("wages and market potentials must be positive".into()));
    }
    let rates = RateTable::build(world, regime)?;
    let frictions = variable_elasticity_frictions(world, &rates);
    let log_xi: Vec<f64> = xi.iter().map(|v| v.ln()).collect();
    let lx = log_numerators(world, &rates, &frictions, wages, &log_xi);
    probabilities_from_numerators(&world.elasticities, &world.aggressiveness, &lx)
}

/// `ln[(1/σ)(σ/(σ−1))^{1−σ} Γ(1 − (σ−1)/ν1)]`.
pub fn log_profit_constant(el: &Elasticities) -> Result<f64> {
    let bound = el.sigma - 1.0;
    if !(el.upsilon1 > bound) {
        return Err(ModelError::DivergentProfit { upsilon1: el.upsilon1, bound });
    }
    let s = el.sigma;
    Ok(-s.ln() + (1.0 - s) * (s / (s - 1.0)).ln() + ln_gamma(1.0 - bound / el.upsilon1))
}

pub fn expected_profits(el: &Elasticities, log_g: &[f64]) -> Result<Vec<f64>> {
    let c = log_profit_constant(el)?;
    let e = (el.sigma - 1.0) / el.upsilon1;
    Ok(log_g.iter().map(|g| (c + e * g).exp()).collect())
}

pub fn expected_profit(
    world: &WorldCalibration,
    regime: &TaxRegime,
    wages: &[f64],
    xi: &[f64],
    i: usize,
) -> Result<f64> {
    log_profit_constant(&world.elasticities)?;
    let ch = choice_probabilities(world, regime, wages, xi)?;
    Ok(expected_profits(&world.elasticities, &ch.log_g[i..=i])?[0])
}

/// Share families implied by a probability tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ShareSet {
    /// `X_ilo / X_i`.
    pub beta: Tensor3,
    /// `X_ln / Q_l`, rows are sources.
    pub mu: DMatrix<f64>,
    /// `X_il / X_i`, rows are residences.
    pub mp_share: DMatrix<f64>,
    /// `X_il0 / Σ_l X_il0`.
    pub tax_base_share: DMatrix<f64>,
    /// `X_ilo / Σ_{l, o≥1} X_ilo`; zero rows for residences that never shift.
    pub ps_share: Tensor3,
}

/// Destination shares and `ln Ξ` from expenditures and price indices.
pub fn destination_shares(world: &WorldCalibration, expenditure: &[f64], price: &[f64]) -> (DMatrix<f64>, Vec<f64>) {
    let n = world.n();
    let s1 = 1.0 - world.elasticities.sigma;
    let mut mu = DMatrix::zeros(n, n);
    let mut log_xi = vec![0.0; n];
    for l in 0..n {
        let terms: Vec<f64> = (0..n)
            .map(|m| s1 * world.trade_frictions[(l, m)].ln() + expenditure[m].ln() - s1 * price[m].ln())
            .collect();
        let lse = log_sum_exp(terms.iter().copied());
        log_xi[l] = lse / s1;
        for m in 0..n {
            mu[(l, m)] = (terms[m] - lse).exp();
        }
    }
    (mu, log_xi)
}

pub fn shares_from_probabilities(
    p: &ChoiceTensor,
    world: &WorldCalibration,
    rates: &RateTable,
    expenditure: &[f64],
    price: &[f64],
) -> Result<ShareSet> {
    let n = p.prob.n;
    let opts = p.prob.options;
    let mut weight = Tensor3::zeros(n, opts - 1);
    for i in 0..n {
        for l in 0..n {
            for o in 0..opts {
                let pr = p.prob.get(i, l, o);
                if pr == 0.0 {
                    continue;
                }
                let t = rates.total.get(i, l, o);
                if t >= 1.0 {
                    return Err(ModelError::RateAtOne { i, l, o, rate: t });
                }
                weight.set(i, l, o, pr / (world.wedge[l] * (1.0 - t)));
            }
        }
    }
    let mut beta = weight.clone();
    let mut mp_share = DMatrix::zeros(n, n);
    let mut tax_base_share = DMatrix::zeros(n, n);
    let mut ps_share = Tensor3::zeros(n, opts - 1);
    for i in 0..n {
        let total = weight.residence_total(i);
        let own: f64 = (0..n).map(|l| weight.get(i, l, 0)).sum();
        let shifted = total - own;
        for l in 0..n {
            let cell = weight.cell(i, l);
            mp_share[(i, l)] = cell.iter().sum::<f64>() / total;
            tax_base_share[(i, l)] = cell[0] / own;
            for o in 0..opts {
                beta.set(i, l, o, cell[o] / total);
                if o > 0 && shifted > 0.0 {
                    ps_share.set(i, l, o, cell[o] / shifted);
                }
            }
        }
    }
    let (mu, _) = destination_shares(world, expenditure, price);
    Ok(ShareSet { beta, mu, mp_share, tax_base_share, ps_share })
}

/// Tax-base share of residence `i` computed straight from the gravity form
/// `Ã_il0 (1 − t_il0)^{ν1/(σ−1) − 1} / ι_l`.
pub fn gravity_tax_base_share(lx: &Tensor3, world: &WorldCalibration, rates: &RateTable, i: usize) -> Vec<f64> {
    let terms: Vec<f64> = (0..lx.n)
        .map(|l| lx.get(i, l, 0) - (1.0 - rates.total.get(i, l, 0)).ln() - world.wedge[l].ln())
        .collect();
    let lse = log_sum_exp(terms.iter().copied());
    terms.iter().map(|t| (t - lse).exp()).collect()
}

/// Shifted-profit share of residence `i` from the nest gravity form
/// `x_ilo^{ν2/ν1} / ((1 − t_ilo) ι_l)`; rows are sources, columns haven slots.
pub fn gravity_ps_share(
    lx: &Tensor3,
    world: &WorldCalibration,
    rates: &RateTable,
    i: usize,
) -> DMatrix<f64> {
    let rho = world.elasticities.rho();
    let h = lx.options - 1;
    let term = |l: usize, o: usize| rho * lx.get(i, l, o) - (1.0 - rates.total.get(i, l, o)).ln() - world.wedge[l].ln();
    let lse = log_sum_exp((0..lx.n).flat_map(|l| (1..=h).map(move |o| (l, o))).map(|(l, o)| term(l, o)));
    DMatrix::from_fn(lx.n, h, |l, j| (term(l, j + 1) - lse).exp())
}
