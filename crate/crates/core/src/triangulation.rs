//! Bilateral profit shifting from residence-haven excess income,
//! source-level totals and multinational-production links.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use shiftsim_estimators::{fit, Dataset, FitResult, RegressionSpec};

use crate::country::CountrySet;
use crate::error::{ModelError, Result};
use crate::numerics::{least_squares, nnls};
use crate::tensor::Tensor3;

/// Excess income booked in havens, by residence.
#[derive(Debug, Clone)]
pub struct PsIhEstimate {
    /// Residence × haven-slot matrix.
    pub ps_ih: DMatrix<f64>,
    pub ps_i: Vec<f64>,
    pub ps_world: f64,
    pub fit: FitResult,
    pub warnings: Vec<String>,
}

/// Fits the income panel and takes, for each haven destination, the fitted
/// value minus the fitted value with the haven terms switched off.
/// The panel needs categorical `residence` and `destination` columns with
/// country labels.
pub fn estimate_ps_ih(
    panel: &Dataset,
    spec: &RegressionSpec,
    countries: &CountrySet,
    haven_terms: &[&str],
) -> Result<PsIhEstimate> {
    let fit = fit(panel, spec)?;
    let with = fit.predict(panel, &[])?;
    let without = fit.predict(panel, haven_terms)?;
    let (res_codes, res_levels) = panel.categorical("residence")?;
    let (dst_codes, dst_levels) = panel.categorical("destination")?;
    let lookup = |levels: &[String], what: &str| -> Result<Vec<usize>> {
        levels
            .iter()
            .map(|l| countries.index_of(l).ok_or_else(|| ModelError::Input(format!("unknown {what} label {l}"))))
            .collect()
    };
    let res_idx = lookup(res_levels, "residence")?;
    let dst_idx = lookup(dst_levels, "destination")?;
    let mut ps_ih = DMatrix::zeros(countries.len(), countries.n_havens());
    let mut warnings = fit.warnings.clone();
    for r in 0..panel.nrows() {
        let i = res_idx[res_codes[r]];
        let k = dst_idx[dst_codes[r]];
        let Some(slot) = countries.haven_slot(k) else { continue };
        if countries.is_haven(i) {
            continue;
        }
        let excess = with[r] - without[r];
        if excess < 0.0 {
            warnings.push(format!(
                "negative excess income {excess:.6} for {} -> {} clipped to zero",
                countries.label(i),
                countries.label(k)
            ));
            continue;
        }
        ps_ih[(i, slot)] += excess;
    }
    let ps_i: Vec<f64> = ps_ih.row_iter().map(|r| r.sum()).collect();
    let ps_world = ps_i.iter().sum();
    Ok(PsIhEstimate { ps_ih, ps_i, ps_world, fit, warnings })
}

/// Allocation of conduit-haven income to the havens the conduit invests in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConduitCorrection {
    /// Θ_ih': share of residence i's income in conduit haven h' that is
    /// only passing through. Residence × haven slot.
    #[serde(with = "crate::serde_inf::matrix")]
    pub theta_conduit: DMatrix<f64>,
    /// Non-SPE outward stocks from haven h' (rows) into haven h (columns).
    #[serde(with = "crate::serde_inf::matrix")]
    pub stocks: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct ConduitResult {
    pub ps_ih: DMatrix<f64>,
    /// `realloc[(i, h', h)]`, stored as `Tensor3` with option index `h`.
    pub realloc: Vec<DMatrix<f64>>,
    pub warnings: Vec<String>,
}

/// Moves `Θ_ih' PS_ih'` out of each conduit haven `h'` into havens `h` in
/// proportion to `h'`'s non-SPE outward stocks. Row totals are preserved.
pub fn conduit_correct(ps_ih: &DMatrix<f64>, cc: &ConduitCorrection) -> Result<ConduitResult> {
    let (n, h) = ps_ih.shape();
    if cc.theta_conduit.shape() != (n, h) || cc.stocks.shape() != (h, h) {
        return Err(ModelError::Dimension("conduit inputs do not match the residence × haven matrix".into()));
    }
    if cc.theta_conduit.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(ModelError::Input("conduit shares must lie in [0, 1]".into()));
    }
    let mut out = ps_ih.clone();
    let mut realloc = vec![DMatrix::zeros(h, h); n];
    let mut warnings = Vec::new();
    for hp in 0..h {
        let row_total: f64 = cc.stocks.row(hp).sum();
        if !(row_total > 0.0) {
            if cc.theta_conduit.column(hp).iter().any(|t| *t > 0.0) {
                warnings.push(format!("no outward stocks for conduit haven slot {hp}; passed through unchanged"));
            }
            continue;
        }
        for i in 0..n {
            let moved = cc.theta_conduit[(i, hp)] * ps_ih[(i, hp)];
            if moved == 0.0 {
                continue;
            }
            out[(i, hp)] -= moved;
            for hh in 0..h {
                let part = moved * cc.stocks[(hp, hh)] / row_total;
                out[(i, hh)] += part;
                realloc[i][(hp, hh)] = part;
            }
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(ConduitResult { ps_ih: out, realloc, warnings })
}

/// Re-attributes the income booked by a non-haven conduit residence
/// to ultimate residences with the given key (normalized internally).
/// Column totals are unchanged.
pub fn reattribute_conduit_residence(ps_ih: &DMatrix<f64>, conduit: usize, key: &[f64]) -> Result<DMatrix<f64>> {
    let n = ps_ih.nrows();
    if key.len() != n || conduit >= n {
        return Err(ModelError::Dimension("conduit key length".into()));
    }
    let total: f64 = key.iter().sum();
    if !(total > 0.0) || key.iter().any(|k| *k < 0.0) {
        return Err(ModelError::Input("conduit key must be nonnegative with positive sum".into()));
    }
    let mut out = ps_ih.clone();
    let row = ps_ih.row(conduit).clone_owned();
    out.row_mut(conduit).fill(0.0);
    for i in 0..n {
        for j in 0..ps_ih.ncols() {
            out[(i, j)] += row[j] * key[i] / total;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum PsLMethod {
    /// Shares proportional to size times production-to-profit intensity.
    Intensity { size: Vec<f64> },
    /// Shares proportional to the gap between model-implied pre-tax
    /// profits `ι Q / σ` and reported profits.
    ProfitGap { wedge: Vec<f64>, sigma: f64 },
    /// Externally supplied amounts, taken verbatim.
    External { ps_l: Vec<f64> },
}

/// Source-country shares of shifted profits and the implied amounts.
/// Only non-havens get a share.
pub fn quantify_ps_l(
    countries: &CountrySet,
    production: &[f64],
    profits: &[f64],
    ps_world: f64,
    method: &PsLMethod,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = countries.len();
    if production.len() != n || profits.len() != n {
        return Err(ModelError::Dimension("production and profits must cover every country".into()));
    }
    let nh = countries.non_havens();
    let weights: Vec<f64> = match method {
        PsLMethod::External { ps_l } => {
            if ps_l.len() != n {
                return Err(ModelError::Dimension("external PS_l length".into()));
            }
            let total: f64 = nh.iter().map(|l| ps_l[*l]).sum();
            let shares = (0..n).map(|l| if countries.is_haven(l) { 0.0 } else { ps_l[l] / total }).collect();
            return Ok((shares, ps_l.clone()));
        }
        PsLMethod::Intensity { size } => {
            if nh.iter().any(|l| !(profits[*l] > 0.0) || !(production[*l] > 0.0)) {
                return Err(ModelError::Input("zero profits or production in a non-haven".into()));
            }
            let q: f64 = nh.iter().map(|l| production[*l]).sum();
            let p: f64 = nh.iter().map(|l| profits[*l]).sum();
            (0..n)
                .map(|l| if countries.is_haven(l) { 0.0 } else { size[l] * (production[l] / q) / (profits[l] / p) })
                .collect()
        }
        PsLMethod::ProfitGap { wedge, sigma } => (0..n)
            .map(|l| if countries.is_haven(l) { 0.0 } else { (wedge[l] * production[l] / sigma - profits[l]).max(0.0) })
            .collect(),
    };
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(ModelError::Input("no source carries any shifting weight".into()));
    }
    let shares: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let ps_l = shares.iter().map(|s| s * ps_world).collect();
    Ok((shares, ps_l))
}

/// How source attractiveness for shifting is measured.
#[derive(Debug, Clone, PartialEq)]
pub enum Attraction {
    /// Structural MP frictions γ_il: `Γ = (double ratio)^{-ν2}`.
    Frictions(DMatrix<f64>),
    /// Observed MP sales booked at the source, `X_ill`:
    /// `Γ = (double ratio)^{ν2/ν1}`.
    MpSales(DMatrix<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftingDecomposition {
    pub ps_world: f64,
    pub ps_i: Vec<f64>,
    pub ps_l: Vec<f64>,
    /// Residence × haven slot.
    #[serde(with = "crate::serde_inf::matrix")]
    pub ps_ih: DMatrix<f64>,
    pub s_i: Vec<f64>,
    #[serde(with = "crate::serde_inf::matrix")]
    pub s_il: DMatrix<f64>,
    /// Source × haven slot; each non-haven row sums to one.
    #[serde(with = "crate::serde_inf::matrix")]
    pub s_lh: DMatrix<f64>,
    #[serde(with = "crate::serde_inf::matrix")]
    pub s_ih: DMatrix<f64>,
    #[serde(with = "crate::serde_inf::matrix")]
    pub ps_lh: DMatrix<f64>,
    #[serde(with = "crate::serde_inf::matrix")]
    pub gamma_attract: DMatrix<f64>,
    pub reference: usize,
    pub step_a_iterations: usize,
    /// Residual of the residence-haven system relative to PS^W.
    pub step_c_residual: f64,
    pub warnings: Vec<String>,
}

impl ShiftingDecomposition {
    /// `PS_ilh = PS_i s_il s_lh`, option index `1 + h`.
    pub fn ps_ilh(&self) -> Tensor3 {
        let n = self.ps_i.len();
        let h = self.s_lh.ncols();
        let mut t = Tensor3::zeros(n, h);
        for i in 0..n {
            for l in 0..n {
                for j in 0..h {
                    t.set(i, l, j + 1, self.ps_i[i] * self.s_il[(i, l)] * self.s_lh[(l, j)]);
                }
            }
        }
        t
    }

    /// `max |s_ih − Σ_l s_il s_lh|`.
    pub fn triangle_gap(&self) -> f64 {
        let implied = &self.s_il * &self.s_lh;
        let mut gap = 0.0f64;
        for i in 0..self.ps_i.len() {
            if self.ps_i[i] > 0.0 {
                for j in 0..self.s_lh.ncols() {
                    gap = gap.max((self.s_ih[(i, j)] - implied[(i, j)]).abs());
                }
            }
        }
        gap
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TriangulationOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for TriangulationOptions {
    fn default() -> Self {
        Self { tol: 1e-14, max_iter: 10_000 }
    }
}

pub fn attractiveness(
    countries: &CountrySet,
    attraction: &Attraction,
    reference: usize,
    upsilon1: f64,
    upsilon2: f64,
) -> Result<DMatrix<f64>> {
    let n = countries.len();
    let (m, exponent) = match attraction {
        Attraction::Frictions(g) => (g, -upsilon2),
        Attraction::MpSales(x) => (x, upsilon2 / upsilon1),
    };
    if m.shape() != (n, n) {
        return Err(ModelError::Dimension("attraction matrix must be N × N".into()));
    }
    let r = reference;
    let mut gamma = DMatrix::zeros(n, n);
    for i in countries.non_havens() {
        for l in countries.non_havens() {
            let dr = (m[(i, l)] / m[(i, r)]) / (m[(r, l)] / m[(r, r)]);
            let v = dr.powf(exponent);
            gamma[(i, l)] = if v.is_finite() { v } else { 0.0 };
        }
    }
    Ok(gamma)
}

fn row_shares(gamma: &DMatrix<f64>, u: &[f64], rows: &[usize], n: usize) -> DMatrix<f64> {
    let mut s = DMatrix::zeros(n, n);
    for &i in rows {
        let denom: f64 = rows.iter().map(|l| gamma[(i, *l)] * u[*l]).sum();
        if denom > 0.0 {
            for &l in rows {
                s[(i, l)] = gamma[(i, l)] * u[l] / denom;
            }
        }
    }
    s
}

fn implied_ps_l(s_il: &DMatrix<f64>, ps_i: &[f64], rows: &[usize], n: usize) -> Vec<f64> {
    let mut d = vec![0.0; n];
    for &i in rows {
        for &l in rows {
            d[l] += ps_i[i] * s_il[(i, l)];
        }
    }
    d
}

/// Step A: find the reference residence's source shares so that the
/// implied source totals match `ps_l`. Proportional scaling first, then a
/// damped Newton polish in log coordinates if scaling stalls.
fn solve_reference_shares(
    gamma: &DMatrix<f64>,
    ps_i: &[f64],
    ps_l: &[f64],
    rows: &[usize],
    n: usize,
    opts: &TriangulationOptions,
) -> Result<(Vec<f64>, usize)> {
    let mut u = vec![0.0; n];
    let total: f64 = rows.iter().map(|l| ps_l[*l]).sum();
    for &l in rows {
        u[l] = ps_l[l] / total;
    }
    let gap = |u: &[f64]| {
        let d = implied_ps_l(&row_shares(gamma, u, rows, n), ps_i, rows, n);
        rows.iter().map(|l| ((d[*l] - ps_l[*l]) / total).abs()).fold(0.0f64, f64::max)
    };
    let mut trace = Vec::new();
    for it in 0..opts.max_iter {
        let d = implied_ps_l(&row_shares(gamma, &u, rows, n), ps_i, rows, n);
        let g = rows.iter().map(|l| ((d[*l] - ps_l[*l]) / total).abs()).fold(0.0f64, f64::max);
        trace.push(g);
        if g <= opts.tol {
            return Ok((u, it));
        }
        for &l in rows {
            if d[l] > 0.0 {
                u[l] *= ps_l[l] / d[l];
            }
        }
        let s: f64 = rows.iter().map(|l| u[*l]).sum();
        rows.iter().for_each(|l| u[*l] /= s);
    }
    // Newton on ln u with the last coordinate pinned.
    let m = rows.len();
    let mut x: Vec<f64> = rows.iter().map(|l| u[*l].max(1e-300).ln()).collect();
    let resid = |x: &[f64]| -> Vec<f64> {
        let mut uu = vec![0.0; n];
        for (k, &l) in rows.iter().enumerate() {
            uu[l] = x[k].exp();
        }
        let d = implied_ps_l(&row_shares(gamma, &uu, rows, n), ps_i, rows, n);
        rows[..m - 1].iter().map(|l| (d[*l] / ps_l[*l]).ln()).collect()
    };
    for _ in 0..100 {
        let r = resid(&x);
        let norm = r.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if norm <= opts.tol {
            break;
        }
        let jac = DMatrix::from_fn(m - 1, m - 1, |a, b| {
            let mut xp = x.clone();
            xp[b] += 1e-7;
            (resid(&xp)[a] - r[a]) / 1e-7
        });
        let step = least_squares(&jac, &DVector::from_vec(r.clone()));
        let mut t = 1.0;
        loop {
            let trial: Vec<f64> =
                x.iter().enumerate().map(|(k, v)| if k < m - 1 { v - t * step[k] } else { *v }).collect();
            let nt = resid(&trial).iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if nt < norm || t < 1e-8 {
                x = trial;
                break;
            }
            t *= 0.5;
        }
    }
    let mut out = vec![0.0; n];
    for (k, &l) in rows.iter().enumerate() {
        out[l] = x[k].exp();
    }
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= s);
    let g = gap(&out);
    if g <= opts.tol.max(1e-12) {
        Ok((out, opts.max_iter))
    } else {
        trace.push(g);
        Err(ModelError::Convergence { what: "source shares of the reference residence", iterations: opts.max_iter, residual: g, trace })
    }
}

/// Inputs are indexed by country; haven rows and columns of `ps_l`,
/// `ps_i` are ignored.
pub fn triangulate(
    countries: &CountrySet,
    ps_i: &[f64],
    ps_l: &[f64],
    ps_ih: &DMatrix<f64>,
    attraction: &Attraction,
    upsilon1: f64,
    upsilon2: f64,
    opts: &TriangulationOptions,
) -> Result<ShiftingDecomposition> {
    let n = countries.len();
    let h = countries.n_havens();
    if ps_i.len() != n || ps_l.len() != n || ps_ih.shape() != (n, h) {
        return Err(ModelError::Dimension("triangulation inputs".into()));
    }
    let rows = countries.non_havens();
    let reference = countries.reference;
    let mut warnings = Vec::new();
    let world_i: f64 = rows.iter().map(|i| ps_i[*i]).sum();
    let world_l: f64 = rows.iter().map(|l| ps_l[*l]).sum();
    if !(world_i > 0.0 && world_l > 0.0) {
        return Err(ModelError::Input("no shifted profits to allocate".into()));
    }
    if (world_l / world_i - 1.0).abs() > 5e-3 {
        return Err(ModelError::InconsistentTotals(format!(
            "residence total {world_i} and source total {world_l} differ by more than 0.5%"
        )));
    }
    let ps_l: Vec<f64> =
        (0..n).map(|l| if countries.is_haven(l) { 0.0 } else { ps_l[l] * world_i / world_l }).collect();
    let ps_i: Vec<f64> = (0..n).map(|i| if countries.is_haven(i) { 0.0 } else { ps_i[i] }).collect();
    let gamma = attractiveness(countries, attraction, reference, upsilon1, upsilon2)?;

    let (u, step_a_iterations) = solve_reference_shares(&gamma, &ps_i, &ps_l, &rows, n, opts)?;
    let s_il = row_shares(&gamma, &u, &rows, n);

    // Step C, one haven at a time, in currency units.
    let f = DMatrix::from_fn(rows.len(), rows.len(), |a, b| ps_i[rows[a]] * s_il[(rows[a], rows[b])]);
    let mut s_lh = DMatrix::zeros(n, h);
    let mut resid2 = 0.0;
    for j in 0..h {
        let b = DVector::from_fn(rows.len(), |a, _| ps_ih[(rows[a], j)]);
        let x = nnls(&f, &b);
        resid2 += (&f * &x - &b).norm_squared();
        for (a, &l) in rows.iter().enumerate() {
            s_lh[(l, j)] = x[a];
        }
    }
    let step_c_residual = resid2.sqrt() / world_i;
    if step_c_residual > 1e-6 {
        warnings.push(format!("inconsistent inputs: residence-haven residual {step_c_residual:.3e} of world total"));
    }
    for &l in &rows {
        let t: f64 = s_lh.row(l).sum();
        if t > 0.0 {
            s_lh.row_mut(l).iter_mut().for_each(|v| *v /= t);
        } else {
            warnings.push(format!("source {} receives no haven allocation", countries.label(l)));
        }
    }
    let s_ih = DMatrix::from_fn(n, h, |i, j| if ps_i[i] > 0.0 { ps_ih[(i, j)] / ps_i[i] } else { 0.0 });
    let ps_lh = DMatrix::from_fn(n, h, |l, j| ps_l[l] * s_lh[(l, j)]);
    Ok(ShiftingDecomposition {
        ps_world: world_i,
        s_i: ps_i.iter().map(|p| p / world_i).collect(),
        ps_i,
        ps_l,
        ps_ih: ps_ih.clone(),
        s_il,
        s_lh,
        s_ih,
        ps_lh,
        gamma_attract: gamma,
        reference,
        step_a_iterations,
        step_c_residual,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn consistent_inputs() -> (CountrySet, Vec<f64>, Vec<f64>, DMatrix<f64>, DMatrix<f64>) {
        // Build PS_ilh = c_i γ_il^{-ν2} g_l k_lh directly.
        let c = CountrySet::generic(&[false, false, false, true, true]);
        let v2 = 8.0;
        let gam: DMatrix<f64> = DMatrix::from_row_slice(5, 5, &[
            1.0, 1.2, 1.3, 1.1, 1.4,
            1.1, 1.0, 1.25, 1.2, 1.2,
            1.3, 1.15, 1.0, 1.3, 1.1,
            1.2, 1.2, 1.2, 1.0, 1.2,
            1.2, 1.2, 1.2, 1.2, 1.0,
        ]);
        let ci = [2.0, 1.0, 0.5];
        let gl = [1.0, 0.7, 1.5];
        let k: DMatrix<f64> = DMatrix::from_row_slice(3, 2, &[0.6, 0.4, 0.2, 0.8, 0.5, 0.5]);
        let mut ps_i = vec![0.0; 5];
        let mut ps_l = vec![0.0; 5];
        let mut ps_ih = DMatrix::zeros(5, 2);
        for i in 0..3 {
            for l in 0..3 {
                for j in 0..2 {
                    let v = ci[i] * gam[(i, l)].powf(-v2) * gl[l] * k[(l, j)];
                    ps_i[i] += v;
                    ps_l[l] += v;
                    ps_ih[(i, j)] += v;
                }
            }
        }
        (c, ps_i, ps_l, ps_ih, gam)
    }

    #[test]
    fn recovers_consistent_allocation() {
        let (c, ps_i, ps_l, ps_ih, gam) = consistent_inputs();
        let d = triangulate(&c, &ps_i, &ps_l, &ps_ih, &Attraction::Frictions(gam), 4.0, 8.0, &Default::default()).unwrap();
        assert!(d.triangle_gap() <= 1e-12);
        assert!((d.s_lh[(1, 1)] - 0.8).abs() < 1e-10);
        let total: f64 = d.ps_lh.iter().sum();
        assert!((total / d.ps_world - 1.0).abs() < 1e-12);
        for &l in &[0usize, 1, 2] {
            let implied: f64 = (0..3).map(|i| d.ps_i[i] * d.s_il[(i, l)]).sum();
            assert!((implied / d.ps_l[l] - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn mp_sales_and_frictions_give_same_attractiveness() {
        let (c, _, _, _, gam) = consistent_inputs();
        let (v1, v2) = (4.0, 8.0);
        let x = gam.map(|g| 3.0 * g.powf(-v1));
        let a = attractiveness(&c, &Attraction::Frictions(gam), 0, v1, v2).unwrap();
        let b = attractiveness(&c, &Attraction::MpSales(x), 0, v1, v2).unwrap();
        assert!((a - b).amax() < 1e-12);
    }

    #[test]
    fn higher_friction_lowers_share() {
        let (c, ps_i, ps_l, ps_ih, gam) = consistent_inputs();
        let base = triangulate(&c, &ps_i, &ps_l, &ps_ih, &Attraction::Frictions(gam.clone()), 4.0, 8.0, &Default::default()).unwrap();
        let gam2 = gam.clone();
        let g = attractiveness(&c, &Attraction::Frictions(gam2.clone()), 0, 4.0, 8.0).unwrap();
        let mut bumped = gam2;
        bumped[(1, 2)] *= 1.1;
        let g2 = attractiveness(&c, &Attraction::Frictions(bumped), 0, 4.0, 8.0).unwrap();
        let u: Vec<f64> = (0..5).map(|l| if l < 3 { base.s_il[(0, l)] } else { 0.0 }).collect();
        let s1 = row_shares(&g, &u, &[0, 1, 2], 5);
        let s2 = row_shares(&g2, &u, &[0, 1, 2], 5);
        assert!(s2[(1, 2)] < s1[(1, 2)]);
    }

    #[test]
    fn totals_must_agree() {
        let (c, ps_i, mut ps_l, ps_ih, gam) = consistent_inputs();
        ps_l[0] *= 1.5;
        let e = triangulate(&c, &ps_i, &ps_l, &ps_ih, &Attraction::Frictions(gam), 4.0, 8.0, &Default::default());
        assert!(matches!(e, Err(ModelError::InconsistentTotals(_))));
    }

    #[test]
    fn conduit_examples() {
        let ps = DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 2.0, 2.0]);
        let zero = ConduitCorrection { theta_conduit: DMatrix::zeros(2, 2), stocks: DMatrix::from_element(2, 2, 1.0) };
        assert_eq!(conduit_correct(&ps, &zero).unwrap().ps_ih, ps);
        let full = ConduitCorrection {
            theta_conduit: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]),
            stocks: DMatrix::from_row_slice(2, 2, &[0.0, 5.0, 0.0, 0.0]),
        };
        let out = conduit_correct(&ps, &full).unwrap().ps_ih;
        assert_eq!(out, DMatrix::from_row_slice(2, 2, &[0.0, 4.0, 0.0, 4.0]));
        let missing = ConduitCorrection {
            theta_conduit: DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.5]),
            stocks: DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 1.0]),
        };
        let r = conduit_correct(&ps, &missing).unwrap();
        assert_eq!(r.warnings.len(), 1);
        assert_eq!(r.ps_ih.column(0).sum() + r.ps_ih.column(1).sum(), 8.0);
    }

    #[test]
    fn conduit_residence_key_preserves_columns() {
        let ps = DMatrix::from_row_slice(3, 2, &[3.0, 1.0, 2.0, 2.0, 4.0, 0.0]);
        let out = reattribute_conduit_residence(&ps, 2, &[1.0, 3.0, 0.0]).unwrap();
        assert_eq!(out.row(2).sum(), 0.0);
        assert!((out[(1, 0)] - 5.0).abs() < 1e-15);
        for j in 0..2 {
            assert!((out.column(j).sum() - ps.column(j).sum()).abs() < 1e-14);
        }
    }

    #[test]
    fn ps_l_methods() {
        let c = CountrySet::generic(&[false, false, false, true]);
        let (s, _) = quantify_ps_l(&c, &[1.0; 4], &[1.0; 4], 10.0, &PsLMethod::Intensity { size: vec![1.0; 4] }).unwrap();
        assert!((s[0] - 1.0 / 3.0).abs() < 1e-15 && s[3] == 0.0);
        // Intensity 1.5 against 1.0 at equal size.
        let (s, _) = quantify_ps_l(&c, &[1.5, 1.0, 1.0, 1.0], &[1.0, 1.0, 1.0, 1.0], 10.0, &PsLMethod::Intensity { size: vec![1.0; 4] }).unwrap();
        let ratio = s[0] / s[1];
        let q: f64 = 3.5;
        let expect = (1.5 / q) / (1.0 / q);
        assert!((ratio - expect).abs() < 1e-12);
        let ext = vec![4.0, 3.0, 3.0, 0.0];
        let (s, p) = quantify_ps_l(&c, &[1.0; 4], &[1.0; 4], 10.0, &PsLMethod::External { ps_l: ext.clone() }).unwrap();
        assert_eq!(p, ext);
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let err = quantify_ps_l(&c, &[1.0; 4], &[0.0, 1.0, 1.0, 1.0], 10.0, &PsLMethod::Intensity { size: vec![1.0; 4] });
        assert!(err.is_err());
    }
}
