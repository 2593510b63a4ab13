//! Inverts an observed equilibrium into trade costs, market potentials,
//! MP frictions, source productivities, shifting frictions and
//! aggressiveness.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use shiftsim_estimators::{fit, Dataset, RegressionSpec};

use crate::country::CountrySet;
use crate::error::{ModelError, Result};
use crate::numerics::{bfgs, least_squares, log_sum_exp};
use crate::tensor::Tensor3;
use crate::world::{theta_bar_from_tech, Elasticities};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeBackout {
    pub price: Vec<f64>,
    #[serde(with = "crate::serde_inf::matrix")]
    pub tau: DMatrix<f64>,
    pub xi: Vec<f64>,
    /// `Σ (τ_ln − τ_nl)²` at the returned prices.
    pub asymmetry: f64,
    pub grad_norm: f64,
}

fn tau_from_log_price(c: &DMatrix<f64>, q: &[f64], sigma: f64) -> DMatrix<f64> {
    let n = q.len();
    DMatrix::from_fn(n, n, |l, m| if l == m { 1.0 } else { ((c[(l, m)] + q[l] - q[m]) / (1.0 - sigma)).exp() })
}

/// Asymmetry objective and its gradient in `ln P` (numeraire excluded).
fn asymmetry(c: &DMatrix<f64>, lp: &[f64], numeraire: usize, sigma: f64) -> (f64, Vec<f64>) {
    let n = c.nrows();
    let q: Vec<f64> = full_log_price(lp, numeraire, n).iter().map(|p| (sigma - 1.0) * p).collect();
    let tau = tau_from_log_price(c, &q, sigma);
    let mut f = 0.0;
    let mut grad = vec![0.0; n];
    for l in 0..n {
        for m in 0..n {
            f += (tau[(l, m)] - tau[(m, l)]).powi(2);
            grad[l] -= 4.0 * (tau[(l, m)].powi(2) - tau[(m, l)].powi(2));
        }
    }
    let g = (0..n).filter(|k| *k != numeraire).map(|k| grad[k]).collect();
    (f, g)
}

fn full_log_price(lp: &[f64], numeraire: usize, n: usize) -> Vec<f64> {
    let mut it = lp.iter();
    (0..n).map(|k| if k == numeraire { 0.0 } else { *it.next().expect("price layout") }).collect()
}

/// Price indices chosen to make implied trade costs as symmetric as
/// possible; `trade` rows are origins, columns destinations.
pub fn backout_trade_costs(trade: &DMatrix<f64>, expenditure: &[f64], sigma: f64, numeraire: usize) -> Result<TradeBackout> {
    let n = trade.nrows();
    if trade.shape() != (n, n) || expenditure.len() != n || numeraire >= n {
        return Err(ModelError::Dimension("trade matrix and expenditures".into()));
    }
    if let Some(l) = (0..n).find(|l| !(trade[(*l, *l)] > 0.0)) {
        return Err(ModelError::Input(format!("own trade of country {l} is not positive")));
    }
    if expenditure.iter().any(|y| !(*y > 0.0)) {
        return Err(ModelError::Input("expenditures must be positive".into()));
    }
    let c = DMatrix::from_fn(n, n, |l, m| {
        trade[(l, m)].ln() - trade[(l, l)].ln() + expenditure[l].ln() - expenditure[m].ln()
    });
    // Log-symmetric start: q_l − q_m cancels the antisymmetric part of c.
    let mut q0: Vec<f64> = (0..n)
        .map(|l| {
            let (s, k) = (0..n)
                .filter(|m| c[(l, *m)].is_finite() && c[(*m, l)].is_finite())
                .fold((0.0, 0usize), |(s, k), m| (s + c[(l, m)] - c[(m, l)], k + 1));
            -0.5 * s / k.max(1) as f64
        })
        .collect();
    let shift = q0[numeraire];
    q0.iter_mut().for_each(|q| *q -= shift);
    let lp0: Vec<f64> = (0..n).filter(|k| *k != numeraire).map(|k| q0[k] / (sigma - 1.0)).collect();
    let objective = |lp: &[f64]| asymmetry(&c, lp, numeraire, sigma);
    let mut rng = ChaCha8Rng::seed_from_u64(0x7a0);
    let mut best = bfgs(objective, &lp0, 1e-12, 500);
    for _ in 0..4 {
        let start: Vec<f64> = lp0.iter().map(|v| v + 0.1 * (rng.random::<f64>() - 0.5)).collect();
        let m = bfgs(objective, &start, 1e-12, 500);
        if m.value < best.value {
            best = m;
        }
    }
    if best.grad_norm > 1e-6 {
        log::warn!("trade-cost asymmetry search stopped with gradient norm {:.3e}", best.grad_norm);
    }
    let lp = full_log_price(&best.x, numeraire, n);
    let q: Vec<f64> = lp.iter().map(|p| (sigma - 1.0) * p).collect();
    let tau = tau_from_log_price(&c, &q, sigma);
    let price: Vec<f64> = lp.iter().map(|p| p.exp()).collect();
    let s1 = 1.0 - sigma;
    let xi = (0..n)
        .map(|l| {
            let lse = log_sum_exp((0..n).map(|m| s1 * tau[(l, m)].ln() + expenditure[m].ln() - s1 * lp[m]));
            (lse / s1).exp()
        })
        .collect();
    Ok(TradeBackout { price, tau, xi, asymmetry: best.value, grad_norm: best.grad_norm })
}

/// Observed prices and taxes the inversions condition on.
#[derive(Debug, Clone)]
pub struct SourceConditions<'a> {
    pub countries: &'a CountrySet,
    pub elasticities: Elasticities,
    pub wages: &'a [f64],
    pub xi: &'a [f64],
    pub wedge: &'a [f64],
    pub tax_domestic: &'a [f64],
    pub tax_haven: &'a [f64],
}

impl SourceConditions<'_> {
    /// `ln[(ι^{1/(1−σ)} w Ξ)^{−ν1}]`.
    fn log_cost_term(&self, l: usize) -> f64 {
        let el = &self.elasticities;
        -el.upsilon1 * (self.wages[l].ln() + self.xi[l].ln()) + el.tax_exponent() * self.wedge[l].ln()
    }

    fn log_net(&self, t: f64) -> f64 {
        self.elasticities.tax_exponent() * (1.0 - t).ln()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpBackout {
    #[serde(with = "crate::serde_inf::matrix")]
    pub gamma: DMatrix<f64>,
    pub tech: Vec<f64>,
    /// Residual asymmetry `Σ (ln γ_il − ln γ_li)²` of the chosen split.
    pub asymmetry: f64,
}

/// `mp_sales[(i, l)]` is production of `i`'s firms in `l` booked in `l`.
/// The split between residence scale and source productivity is pinned by
/// minimum asymmetry of γ and `A_ref = 1`.
pub fn backout_gamma_a(mp_sales: &DMatrix<f64>, cond: &SourceConditions) -> Result<MpBackout> {
    let n = cond.countries.len();
    if mp_sales.shape() != (n, n) {
        return Err(ModelError::Dimension("MP sales must be N × N".into()));
    }
    if let Some(i) = (0..n).find(|i| !(mp_sales[(*i, *i)] > 0.0)) {
        return Err(ModelError::Input(format!("domestic MP sales of country {i} are not positive")));
    }
    let v1 = cond.elasticities.upsilon1;
    let t = cond.tax_domestic;
    let log_m = DMatrix::from_fn(n, n, |i, l| {
        let x = mp_sales[(i, l)];
        if x > 0.0 {
            x.ln() + (1.0 - t[l]).ln() + cond.wedge[l].ln() - cond.log_cost_term(l) - cond.log_net(t[l])
        } else {
            f64::NEG_INFINITY
        }
    });
    let r = cond.countries.reference;
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |l| (i, l)))
        .filter(|(i, l)| log_m[(*i, *l)].is_finite() && log_m[(*l, *i)].is_finite())
        .collect();
    let mut a = DMatrix::zeros(pairs.len() + 1, n);
    let mut b = DVector::zeros(pairs.len() + 1);
    for (k, (i, l)) in pairs.iter().enumerate() {
        a[(k, *i)] = 1.0;
        a[(k, *l)] = -1.0;
        b[k] = log_m[(*i, *l)] - log_m[(*l, *i)];
    }
    a[(pairs.len(), r)] = 1.0;
    b[pairs.len()] = log_m[(r, r)];
    let e = least_squares(&a, &b);
    let scale: Vec<f64> = (0..n).map(|i| 0.5 * (log_m[(i, i)] + e[i])).collect();
    let log_a: Vec<f64> = (0..n).map(|i| 0.5 * (log_m[(i, i)] - e[i])).collect();
    let gamma = DMatrix::from_fn(n, n, |i, l| {
        if i == l {
            1.0
        } else if log_m[(i, l)].is_finite() {
            ((scale[i] + log_a[l] - log_m[(i, l)]) / v1).exp()
        } else {
            f64::INFINITY
        }
    });
    let asymmetry = pairs.iter().map(|(i, l)| (gamma[(*i, *l)].ln() - gamma[(*l, *i)].ln()).powi(2)).sum();
    Ok(MpBackout { gamma, tech: log_a.iter().map(|v| v.exp()).collect(), asymmetry })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftingBackout {
    /// Source × haven slot; `inf` where no shifting is observed.
    #[serde(with = "crate::serde_inf::matrix")]
    pub alpha: DMatrix<f64>,
    #[serde(with = "crate::serde_inf::vec")]
    pub theta: Vec<f64>,
    pub theta_bar: f64,
    /// `θ̃_i α_lh` on options `1 + h`; zero elsewhere.
    pub cost: Tensor3,
    pub flags: Vec<String>,
}

/// `ps_flows` holds pre-tax profits booked in havens (options `1 + h`).
/// Requires the territorial baseline so that the booking rate of a
/// shifted triple is the haven rate.
pub fn backout_alpha_theta(
    ps_flows: &Tensor3,
    mp_sales: &DMatrix<f64>,
    mp: &MpBackout,
    cond: &SourceConditions,
) -> Result<ShiftingBackout> {
    let c = cond.countries;
    let n = c.len();
    let h = c.n_havens();
    if ps_flows.n != n || ps_flows.havens() != h {
        return Err(ModelError::Dimension("shifting flows".into()));
    }
    let el = &cond.elasticities;
    let (v1, v2, rho) = (el.upsilon1, el.upsilon2, el.rho());
    let t = cond.tax_domestic;
    let th = cond.tax_haven;
    // ln x_il0 and ln x_ilh before α, with the variable-elasticity term folded in.
    let base = |i: usize, l: usize| mp.tech[l].ln() - v1 * mp.gamma[(i, l)].ln() + cond.log_cost_term(l);
    let nest_base = |i: usize, l: usize, j: usize| -> f64 {
        let mut v = base(i, l) + cond.log_net(th[j]);
        if el.shape_k != 0.0 {
            let d = t[l] - th[j];
            v = if d > 0.0 { v + el.shape_k * d.ln() } else { f64::NEG_INFINITY };
        }
        v
    };
    let mut flags = Vec::new();
    let mut log_g = vec![f64::NAN; n];
    let mut shift_prob = vec![0.0; n];
    let mut cells = Vec::new();
    for i in 0..n {
        let own_post: f64 = (0..n).map(|l| mp_sales[(i, l)] * cond.wedge[l] * (1.0 - t[l]) / el.sigma).sum();
        let ps_post: f64 = (0..n).flat_map(|l| (0..h).map(move |j| (l, j))).map(|(l, j)| ps_flows.get(i, l, j + 1) * (1.0 - th[j])).sum();
        let total = own_post + ps_post;
        if !(total > 0.0) {
            continue;
        }
        // G_i = Σ x_il0 / Σ P_il0.
        let own_prob = own_post / total;
        let lx = log_sum_exp((0..n).filter(|l| mp.gamma[(i, *l)].is_finite()).map(|l| base(i, l) + cond.log_net(t[l])));
        log_g[i] = lx - own_prob.ln();
        shift_prob[i] = ps_post / total;
        for l in 0..n {
            for j in 0..h {
                let v = ps_flows.get(i, l, j + 1);
                if v > 0.0 {
                    let p = v * (1.0 - th[j]) / total;
                    cells.push((i, l, j, p.ln() - rho * nest_base(i, l, j)));
                }
            }
        }
    }
    // ln y_ilh = k_i − ν2 ln α_lh, solved by least squares with one pin.
    let res: Vec<usize> = {
        let mut v: Vec<usize> = cells.iter().map(|c| c.0).collect();
        v.dedup();
        v.sort_unstable();
        v.dedup();
        v
    };
    let mut lh: Vec<(usize, usize)> = cells.iter().map(|c| (c.1, c.2)).collect();
    lh.sort_unstable();
    lh.dedup();
    let mut alpha = DMatrix::from_element(n, h, f64::INFINITY);
    let mut theta = vec![f64::INFINITY; n];
    let theta_bar = theta_bar_from_tech(c, &mp.tech, el);
    let mut cost = Tensor3::zeros(n, h);
    if cells.is_empty() {
        flags.push("no shifting observed; all residences flagged".into());
        return Ok(ShiftingBackout { alpha, theta, theta_bar, cost, flags });
    }
    let ri = |i: usize| res.binary_search(&i).expect("residence index");
    let ci = |l: usize, j: usize| lh.binary_search(&(l, j)).expect("cell index");
    let k = res.len() + lh.len();
    let mut a = DMatrix::zeros(cells.len() + 1, k);
    let mut b = DVector::zeros(cells.len() + 1);
    for (row, (i, l, j, y)) in cells.iter().enumerate() {
        a[(row, ri(*i))] = 1.0;
        a[(row, res.len() + ci(*l, *j))] = -v2;
        b[row] = *y;
    }
    a[(cells.len(), res.len())] = 1.0;
    let sol = least_squares(&a, &b);
    let mut alpha0 = DMatrix::from_element(n, h, f64::INFINITY);
    for (m, (l, j)) in lh.iter().enumerate() {
        alpha0[(*l, *j)] = sol[res.len() + m].exp();
    }
    let mut theta0 = vec![f64::INFINITY; n];
    for &i in &res {
        let log_m = log_sum_exp(
            (0..n)
                .filter(|l| mp.gamma[(i, *l)].is_finite())
                .flat_map(|l| (0..h).map(move |j| (l, j)))
                .filter(|(l, j)| alpha0[(*l, *j)].is_finite())
                .map(|(l, j)| rho * (nest_base(i, l, j) - v1 * alpha0[(l, j)].ln())),
        );
        // S_i G_i = θ^{−ν1} M^{1/ρ}.
        let log_nest = shift_prob[i].ln() + log_g[i];
        theta0[i] = ((log_nest - log_m / rho) / -v1).exp();
    }
    let r = c.reference;
    if !theta0[r].is_finite() {
        return Err(ModelError::Input(format!("reference residence {} shows no shifting", c.label(r))));
    }
    let lambda = theta0[r] / theta_bar;
    alpha = alpha0.map(|v| v * lambda);
    for i in 0..n {
        theta[i] = theta0[i] / lambda;
        if !theta[i].is_finite() && !c.is_haven(i) {
            flags.push(format!("residence {} shows no shifting; aggressiveness set to infinity", c.label(i)));
        }
    }
    for i in 0..n {
        if !theta[i].is_finite() {
            continue;
        }
        for l in 0..n {
            for j in 0..h {
                if alpha[(l, j)].is_finite() {
                    cost.set(i, l, j + 1, theta[i] / theta_bar * alpha[(l, j)]);
                }
            }
        }
    }
    Ok(ShiftingBackout { alpha, theta, theta_bar, cost, flags })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostDecomposition {
    /// `ln θ̃_i` relative to the reference residence.
    pub log_theta: Vec<f64>,
    /// `ln α_lh` on the same normalization, source × haven slot.
    #[serde(with = "crate::serde_inf::matrix")]
    pub log_alpha: DMatrix<f64>,
    pub r2: f64,
    /// Share of the variance of `ln Cost` carried by the α component.
    pub alpha_share: f64,
}

/// Two-way fixed-effects split of `ln Cost_ilh` into residence and
/// (source, haven) components.
pub fn decompose_cost(countries: &CountrySet, cost: &Tensor3) -> Result<CostDecomposition> {
    let n = cost.n;
    let h = cost.havens();
    let mut y = Vec::new();
    let mut res = Vec::new();
    let mut pair = Vec::new();
    for i in 0..n {
        for l in 0..n {
            for j in 0..h {
                let v = cost.get(i, l, j + 1);
                if v > 0.0 && v.is_finite() {
                    y.push(v.ln());
                    res.push(countries.label(i).to_string());
                    pair.push(format!("{}|{}", l, j));
                }
            }
        }
    }
    if y.is_empty() {
        return Err(ModelError::Input("no positive cost cells".into()));
    }
    let data = Dataset::new()
        .with_numeric("ln_cost", y.clone())?
        .with_categorical("residence", &res)?
        .with_categorical("pair", &pair)?;
    let spec = RegressionSpec::ols("ln_cost").fe(&["residence"]).fe(&["pair"]);
    let f = fit(&data, &spec)?;
    let fe_res = f.fixed_effects.iter().find(|e| e.name == "residence").expect("residence effects");
    let fe_pair = f.fixed_effects.iter().find(|e| e.name == "pair").expect("pair effects");
    let ref_label = countries.label(countries.reference);
    let shift = fe_res
        .levels
        .iter()
        .position(|l| l == ref_label)
        .map(|k| fe_res.values[k])
        .ok_or_else(|| ModelError::Input("reference residence has no cost cells".into()))?;
    let mut log_theta = vec![f64::NAN; n];
    for (lvl, v) in fe_res.levels.iter().zip(&fe_res.values) {
        if let Some(i) = countries.index_of(lvl) {
            log_theta[i] = v - shift;
        }
    }
    let intercept = f.coef(shiftsim_estimators::INTERCEPT).unwrap_or(0.0);
    let mut log_alpha = DMatrix::from_element(n, h, f64::NAN);
    for (lvl, v) in fe_pair.levels.iter().zip(&fe_pair.values) {
        let mut parts = lvl.split('|').map(|p| p.parse::<usize>().expect("pair label"));
        let (l, j) = (parts.next().expect("source"), parts.next().expect("haven"));
        log_alpha[(l, j)] = v + shift + intercept;
    }
    let comp: Vec<f64> = pair
        .iter()
        .map(|p| {
            let mut parts = p.split('|').map(|s| s.parse::<usize>().expect("pair label"));
            log_alpha[(parts.next().expect("source"), parts.next().expect("haven"))]
        })
        .collect();
    let var = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
    };
    let total = var(&y);
    let alpha_share = if total > 0.0 { var(&comp) / total } else { 0.0 };
    Ok(CostDecomposition { log_theta, log_alpha, r2: f.r2, alpha_share })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len();
    if m == 0 {
        return f64::NAN;
    }
    if m % 2 == 1 {
        v[m / 2]
    } else {
        0.5 * (v[m / 2 - 1] + v[m / 2])
    }
}

/// Median over finite off-diagonal MP frictions.
pub fn median_mp_friction(gamma: &DMatrix<f64>) -> f64 {
    let n = gamma.nrows();
    median((0..n).flat_map(|i| (0..n).map(move |l| (i, l))).filter(|(i, l)| i != l).map(|(i, l)| gamma[(i, l)]).filter(|v| v.is_finite()).collect())
}

/// Median over positive finite shifting costs.
pub fn median_cost(cost: &Tensor3) -> f64 {
    median(
        (0..cost.n)
            .flat_map(|i| (0..cost.n).flat_map(move |l| (1..cost.options).map(move |o| (i, l, o))))
            .map(|(i, l, o)| cost.get(i, l, o))
            .filter(|v| *v > 0.0 && v.is_finite())
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trade_from(tau: &DMatrix<f64>, y: &[f64], p: &[f64], sigma: f64) -> DMatrix<f64> {
        // X_ln = τ^{1−σ} Y_n P_n^{σ−1} Ξ_l^{σ−1} Q_l with Q chosen so rows
        // and columns balance is not needed for the inversion.
        let n = y.len();
        let s1 = 1.0 - sigma;
        let xi: Vec<f64> = (0..n).map(|l| (0..n).map(|m| tau[(l, m)].powf(s1) * y[m] * p[m].powf(-s1)).sum::<f64>()).collect();
        let q = [1.0, 2.0, 0.7, 1.3];
        DMatrix::from_fn(n, n, |l, m| tau[(l, m)].powf(s1) * y[m] * p[m].powf(-s1) / xi[l] * q[l])
    }

    #[test]
    fn symmetric_trade_gives_symmetric_costs() {
        let tau = DMatrix::from_row_slice(3, 3, &[1.0, 1.5, 1.2, 1.5, 1.0, 1.8, 1.2, 1.8, 1.0]);
        let y = [1.0; 3];
        let x = trade_from(&tau, &y, &[1.0; 3], 5.0);
        let r = backout_trade_costs(&x, &y, 5.0, 0).unwrap();
        assert!(r.asymmetry < 1e-20);
        assert!((&r.tau - &r.tau.transpose()).amax() < 1e-10);
    }

    #[test]
    fn known_world_round_trip() {
        let sigma = 6.88;
        let tau = DMatrix::from_row_slice(4, 4, &[
            1.0, 1.4, 1.9, 1.3, 1.5, 1.0, 1.6, 1.2, 1.7, 1.6, 1.0, 1.4, 1.2, 1.3, 1.5, 1.0,
        ]);
        let y = [3.0, 1.0, 2.0, 0.5];
        let p = [1.0, 1.1, 0.9, 1.2];
        let x = trade_from(&tau, &y, &p, sigma);
        let r = backout_trade_costs(&x, &y, sigma, 0).unwrap();
        let back = trade_from(&r.tau, &y, &r.price, sigma);
        let shares = |m: &DMatrix<f64>| DMatrix::from_fn(4, 4, |l, n| m[(l, n)] / m.column(n).sum());
        let (a, b) = (shares(&x), shares(&back));
        assert!((a - b).amax() < 1e-10);
        let true_obj: f64 = (0..4).flat_map(|l| (0..4).map(move |m| (l, m))).map(|(l, m)| (tau[(l, m)] - tau[(m, l)]).powi(2)).sum();
        assert!(r.asymmetry <= true_obj + 1e-12);
        let doubled: Vec<f64> = y.iter().map(|v| 2.0 * v).collect();
        let r2 = backout_trade_costs(&x, &doubled, sigma, 0).unwrap();
        assert!((&r2.tau - &r.tau).amax() < 1e-9);
    }

    #[test]
    fn zero_own_trade_rejected() {
        let mut x = DMatrix::from_element(2, 2, 1.0);
        x[(1, 1)] = 0.0;
        assert!(backout_trade_costs(&x, &[1.0, 1.0], 5.0, 0).is_err());
    }

    #[test]
    fn multiplicative_costs_decompose_exactly() {
        let c = CountrySet::generic(&[false, false, false, true, true]);
        let th = [1.0, 1.3, 0.8];
        let al = [[1.1, 1.5], [0.9, 1.2], [1.4, 1.0]];
        let mut cost = Tensor3::zeros(5, 2);
        for i in 0..3 {
            for l in 0..3 {
                for j in 0..2 {
                    cost.set(i, l, j + 1, th[i] * al[l][j]);
                }
            }
        }
        let d = decompose_cost(&c, &cost).unwrap();
        assert!((d.r2 - 1.0).abs() < 1e-10);
        for i in 0..3 {
            assert!((d.log_theta[i] - th[i].ln()).abs() < 1e-8);
        }
        assert!((d.log_alpha[(2, 0)] - 1.4f64.ln()).abs() < 1e-8);
    }

    #[test]
    fn alpha_variance_share_recovered() {
        use rand::Rng;
        let c = CountrySet::generic(&[false, false, false, false, false, false, true, true, true]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lt: Vec<f64> = (0..6).map(|_| rng.random::<f64>() - 0.5).collect();
        let la: Vec<f64> = (0..18).map(|_| rng.random::<f64>() - 0.5).collect();
        let var = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
        };
        // Scale α so that its share of the variance on the full grid is 0.26.
        let s = (0.26 / 0.74 * var(&lt) / var(&la)).sqrt();
        let mut cost = Tensor3::zeros(9, 3);
        for i in 0..6 {
            for l in 0..6 {
                for j in 0..3 {
                    let noise = 0.001 * (rng.random::<f64>() - 0.5);
                    cost.set(i, l, j + 1, (lt[i] + s * la[l * 3 + j] + noise).exp());
                }
            }
        }
        let d = decompose_cost(&c, &cost).unwrap();
        assert!((d.alpha_share - 0.26).abs() < 0.01, "{}", d.alpha_share);
    }

    #[test]
    fn permuting_residences_permutes_theta() {
        let c = CountrySet::generic(&[false, false, false, true]);
        let th = [1.0, 1.3, 0.8];
        let build = |perm: [usize; 3]| {
            let mut cost = Tensor3::zeros(4, 1);
            for i in 0..3 {
                for l in 0..3 {
                    cost.set(i, l, 1, th[perm[i]] * (1.0 + 0.1 * l as f64));
                }
            }
            decompose_cost(&c, &cost).unwrap()
        };
        let a = build([0, 1, 2]);
        let b = build([0, 2, 1]);
        assert!((a.log_theta[1] - b.log_theta[2]).abs() < 1e-10);
        assert!((a.log_theta[2] - b.log_theta[1]).abs() < 1e-10);
    }
}
