//! Seeded synthetic worlds with gravity-driven frictions and the flow
//! data an analyst would observe in them.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use shiftsim_estimators::{fit, Dataset, RegressionSpec};

use crate::calibrate::ObservedData;
use crate::country::CountrySet;
use crate::equilibrium::{calibrate_entry, Equilibrium};
use crate::error::{ModelError, Result};
use crate::frictions::median_mp_friction;
use crate::regime::TaxRegime;
use crate::tensor::Tensor3;
use crate::world::{theta_bar_from_tech, Elasticities, WorldCalibration};

/// Log standard deviations of multiplicative noise per flow family.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NoiseLevels {
    pub trade: f64,
    pub mp: f64,
    pub fdi: f64,
    pub ps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub non_havens: usize,
    pub havens: usize,
    pub seed: u64,
    pub elasticities: Elasticities,
    /// Distance elasticities of τ, γ and α.
    pub tau_distance: f64,
    pub gamma_distance: f64,
    pub alpha_distance: f64,
    /// Loading of α on the haven index.
    pub alpha_haven_index: f64,
    /// `ln A_l = tech_slope · z_l`.
    pub tech_slope: f64,
    pub median_gamma: f64,
    pub median_cost: f64,
    /// Spread of `ln θ̃_i`.
    pub aggressiveness_spread: f64,
    pub tax_non_haven: (f64, f64),
    pub tax_haven: (f64, f64),
    pub wedge_range: (f64, f64),
    /// Spread of log labor across non-havens.
    pub size_spread: f64,
    /// Haven labor relative to the mean non-haven.
    pub haven_size: f64,
    /// World shifted profits the labor scale is tuned to hit.
    pub ps_world_target: Option<f64>,
    pub noise: NoiseLevels,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            non_havens: 7,
            havens: 3,
            seed: 1,
            elasticities: Elasticities::default(),
            tau_distance: 0.3,
            gamma_distance: 0.1,
            alpha_distance: 0.05,
            alpha_haven_index: 0.05,
            tech_slope: 0.05,
            median_gamma: 1.40,
            median_cost: 1.23,
            aggressiveness_spread: 0.02,
            tax_non_haven: (0.15, 0.35),
            tax_haven: (0.0, 0.08),
            wedge_range: (0.9, 1.1),
            size_spread: 0.8,
            haven_size: 0.05,
            ps_world_target: Some(397.0),
            noise: NoiseLevels::default(),
        }
    }
}

impl SyntheticSpec {
    /// Ten countries, three of them havens.
    pub fn ten_country(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    /// Three countries, one haven, no level target.
    pub fn micro(seed: u64) -> Self {
        Self { non_havens: 2, havens: 1, seed, ps_world_target: None, ..Self::default() }
    }
}

/// Geometry and covariates the frictions are built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geography {
    pub coordinates: Vec<(f64, f64)>,
    /// `1 + 10 · euclidean distance`; one on the diagonal.
    #[serde(with = "crate::serde_inf::matrix")]
    pub distance: DMatrix<f64>,
    pub tech_covariate: Vec<f64>,
    pub haven_index: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub spec: SyntheticSpec,
    pub world: WorldCalibration,
    pub baseline: Equilibrium,
    pub geography: Geography,
    pub observed: ObservedData,
    /// True pre-tax shifted profits, residence × haven slot.
    pub ps_ih: DMatrix<f64>,
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len();
    if m % 2 == 1 {
        v[m / 2]
    } else {
        0.5 * (v[m / 2 - 1] + v[m / 2])
    }
}

/// Structural world before the labor scale is tuned.
fn draw_world(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<(WorldCalibration, Geography)> {
    let nh = spec.non_havens;
    let h = spec.havens;
    let n = nh + h;
    if nh < 2 || h < 1 {
        return Err(ModelError::Input("need at least two non-havens and one haven".into()));
    }
    let haven: Vec<bool> = (0..n).map(|k| k >= nh).collect();
    let countries = CountrySet::generic(&haven);
    let el = spec.elasticities;
    let std = Normal::new(0.0, 1.0).expect("unit normal");

    let coordinates: Vec<(f64, f64)> = (0..n).map(|_| (rng.random(), rng.random())).collect();
    let distance = DMatrix::from_fn(n, n, |a, b| {
        let (dx, dy) = (coordinates[a].0 - coordinates[b].0, coordinates[a].1 - coordinates[b].1);
        1.0 + 10.0 * (dx * dx + dy * dy).sqrt()
    });
    let mut labor: Vec<f64> = (0..nh).map(|_| (spec.size_spread * std.sample(rng)).exp()).collect();
    labor.sort_by(|a, b| b.total_cmp(a));
    let mean = labor.iter().sum::<f64>() / nh as f64;
    labor.extend((0..h).map(|_| spec.haven_size * mean * (0.5 + rng.random::<f64>())));

    let tech_covariate: Vec<f64> = (0..n).map(|_| std.sample(rng)).collect();
    let tech: Vec<f64> = (0..n).map(|l| (spec.tech_slope * (tech_covariate[l] - tech_covariate[0])).exp()).collect();
    let haven_index: Vec<f64> = (0..h).map(|_| rng.random()).collect();

    let tax_domestic: Vec<f64> = (0..n)
        .map(|k| uniform(rng, if haven[k] { spec.tax_haven } else { spec.tax_non_haven }))
        .collect();
    let tax_haven: Vec<f64> = (0..h).map(|j| tax_domestic[nh + j]).collect();
    let wedge: Vec<f64> = (0..n).map(|_| uniform(rng, spec.wedge_range)).collect();

    let trade_frictions = distance.map(|d| d.powf(spec.tau_distance));
    let raw_gamma = distance.map(|d| d.powf(spec.gamma_distance));
    let scale = spec.median_gamma / median_mp_friction(&raw_gamma);
    let mp_frictions = DMatrix::from_fn(n, n, |a, b| if a == b { 1.0 } else { scale * raw_gamma[(a, b)] });

    let rel_theta: Vec<f64> = (0..n)
        .map(|i| if i == 0 { 1.0 } else { (spec.aggressiveness_spread * std.sample(rng)).exp() })
        .collect();
    let raw_alpha = DMatrix::from_fn(n, h, |l, j| {
        distance[(l, nh + j)].powf(spec.alpha_distance) * (spec.alpha_haven_index * haven_index[j]).exp()
    });
    let raw_cost: Vec<f64> = (0..nh)
        .flat_map(|i| (0..nh).flat_map(move |l| (0..h).map(move |j| (i, l, j))))
        .map(|(i, l, j)| rel_theta[i] * raw_alpha[(l, j)])
        .collect();
    let alpha_scale = spec.median_cost / median(raw_cost);
    let ps_frictions =
        DMatrix::from_fn(n, h, |l, j| if haven[l] { f64::INFINITY } else { alpha_scale * raw_alpha[(l, j)] });
    let theta_bar = theta_bar_from_tech(&countries, &tech, &el);
    let aggressiveness = (0..n).map(|i| if haven[i] { f64::INFINITY } else { rel_theta[i] * theta_bar }).collect();

    let world = WorldCalibration {
        countries,
        elasticities: el,
        firm_mass: labor.clone(),
        labor,
        tech,
        wedge,
        trade_frictions,
        mp_frictions,
        ps_frictions,
        aggressiveness,
        theta_bar,
        tax_domestic,
        tax_haven,
        imbalances: vec![0.0; n],
        entry_cost: vec![1.0; n],
    };
    Ok((world, Geography { coordinates, distance, tech_covariate, haven_index }))
}

fn scaled(world: &WorldCalibration, c: f64) -> WorldCalibration {
    let mut w = world.clone();
    w.labor.iter_mut().for_each(|v| *v *= c);
    w.firm_mass.iter_mut().for_each(|v| *v *= c);
    w
}

/// Solves the baseline in calibration mode and, when a target is set,
/// rescales labor and firm masses by a secant search on the log scale
/// until world shifted profits hit it.
fn solve_scaled(spec: &SyntheticSpec, raw: &WorldCalibration) -> Result<(WorldCalibration, Equilibrium)> {
    let regime = TaxRegime::Territorial;
    let Some(target) = spec.ps_world_target else {
        return calibrate_entry(raw, &regime);
    };
    let eval = |lc: f64| -> Result<(f64, WorldCalibration, Equilibrium)> {
        let (w, eq) = calibrate_entry(&scaled(raw, lc.exp()), &regime)?;
        Ok((eq.shifted_world().ln() - target.ln(), w, eq))
    };
    let (mut x0, (mut f0, mut w, mut eq)) = (0.0, eval(0.0)?);
    let mut x1 = -f0;
    for _ in 0..50 {
        if f0.abs() < 1e-10 {
            break;
        }
        let (f1, w1, e1) = eval(x1)?;
        let slope = if (x1 - x0).abs() > 0.0 { (f1 - f0) / (x1 - x0) } else { 1.0 };
        let next = x1 - f1 / if slope.abs() > 1e-3 { slope } else { 1.0 };
        (x0, f0, w, eq) = (x1, f1, w1, e1);
        x1 = next;
    }
    if f0.abs() > 1e-6 {
        return Err(ModelError::Convergence {
            what: "labor scale for the shifted-profit target",
            iterations: 50,
            residual: f0.abs(),
            trace: vec![],
        });
    }
    Ok((w, eq))
}

fn noisy(rng: &mut ChaCha8Rng, sd: f64, v: f64) -> f64 {
    if sd == 0.0 || v == 0.0 {
        return v;
    }
    let z: f64 = Normal::new(0.0, sd).expect("finite sd").sample(rng);
    v * z.exp()
}

pub const FDI_SIZE: &str = "ln_size";
pub const FDI_DISTANCE: &str = "ln_dist";
pub const FDI_INCOME: &str = "income";

/// Name of the dummy marking residence `i` investing in haven `h`.
pub fn haven_dummy(countries: &CountrySet, i: usize, h: usize) -> String {
    format!("haven_{}_{}", countries.label(i), countries.label(h))
}

/// Income panel for non-haven residences: a gravity baseline on every
/// destination, plus the residence's shifted profits on haven rows.
fn fdi_panel(
    world: &WorldCalibration,
    eq: &Equilibrium,
    geo: &Geography,
    ps_ih: &DMatrix<f64>,
    sd: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Dataset, Vec<String>)> {
    let c = &world.countries;
    let n = c.len();
    let (mut res, mut dst, mut y, mut size, mut dist) = (vec![], vec![], vec![], vec![], vec![]);
    let residences = c.non_havens();
    let terms: Vec<(usize, usize, String)> = residences
        .iter()
        .flat_map(|i| c.havens().into_iter().map(move |h| (*i, h)))
        .map(|(i, h)| (i, h, haven_dummy(c, i, h)))
        .collect();
    let mut dummies = vec![Vec::new(); terms.len()];
    let base_scale = 0.05 * eq.shifted_world() / n as f64;
    for &i in &residences {
        for k in (0..n).filter(|k| *k != i) {
            let base = base_scale * (eq.expenditure[k] / eq.expenditure[0]).powf(0.8) * geo.distance[(i, k)].powf(-1.0)
                * (0.3 * i as f64 / n as f64).exp();
            let excess = c.haven_slot(k).map_or(0.0, |j| ps_ih[(i, j)]);
            res.push(c.label(i).to_string());
            dst.push(c.label(k).to_string());
            y.push(noisy(rng, sd, base + excess));
            size.push(eq.expenditure[k].ln());
            dist.push(geo.distance[(i, k)].ln());
            for (t, (ti, th, _)) in terms.iter().enumerate() {
                dummies[t].push(if *ti == i && *th == k { 1.0 } else { 0.0 });
            }
        }
    }
    let mut data = Dataset::new()
        .with_categorical("residence", &res)?
        .with_categorical("destination", &dst)?
        .with_numeric(FDI_INCOME, y)?
        .with_numeric(FDI_SIZE, size)?
        .with_numeric(FDI_DISTANCE, dist)?;
    for ((_, _, name), col) in terms.iter().zip(dummies) {
        data.add_numeric(name, col)?;
    }
    Ok((data, terms.into_iter().map(|t| t.2).collect()))
}

pub fn generate_world(spec: &SyntheticSpec) -> Result<SyntheticWorld> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (raw, geography) = draw_world(spec, &mut rng)?;
    let (world, baseline) = solve_scaled(spec, &raw)?;
    let ps_ih = baseline.shifted_by_residence_haven();
    let noise = spec.noise;
    let n = world.n();
    let trade = baseline.trade.map(|v| noisy(&mut rng, noise.trade, v));
    let mp_sales = DMatrix::from_fn(n, n, |i, l| baseline.sales.get(i, l, 0));
    let mp_sales = mp_sales.map(|v| noisy(&mut rng, noise.mp, v));
    let (fdi, haven_terms) = fdi_panel(&world, &baseline, &geography, &ps_ih, noise.fdi, &mut rng)?;
    let ps_l: Vec<f64> = baseline.shifted_by_source().into_iter().map(|v| noisy(&mut rng, noise.ps, v)).collect();
    let observed = ObservedData {
        countries: world.countries.clone(),
        sigma: world.elasticities.sigma,
        trade,
        expenditure: baseline.expenditure.clone(),
        wages: baseline.wages.clone(),
        mp_sales,
        reported_profits: baseline.reported_by_source(),
        fdi_panel: fdi,
        fdi_covariates: vec![FDI_SIZE.into(), FDI_DISTANCE.into()],
        haven_terms,
        ps_l: Some(ps_l),
        tax_domestic: world.tax_domestic.clone(),
        tax_haven: world.tax_haven.clone(),
        distance: geography.distance.clone(),
        tech_covariate: geography.tech_covariate.clone(),
        haven_index: geography.haven_index.clone(),
        conduit: None,
    };
    Ok(SyntheticWorld { spec: spec.clone(), world, baseline, geography, observed, ps_ih })
}

/// Income panel built as `baseline · exp(β · Haven)` with a single haven
/// dummy, for checking the excess-income estimator in isolation.
pub fn haven_premium_panel(countries: &CountrySet, beta: f64, seed: u64) -> Result<(Dataset, DMatrix<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = countries.len();
    let mut cols: (Vec<String>, Vec<String>, Vec<f64>, Vec<f64>, Vec<f64>) = Default::default();
    let mut excess = DMatrix::zeros(n, countries.n_havens());
    for i in countries.non_havens() {
        for k in (0..n).filter(|k| *k != i) {
            let base = (1.0 + rng.random::<f64>()) * 10.0;
            let hv = if countries.is_haven(k) { 1.0 } else { 0.0 };
            if let Some(j) = countries.haven_slot(k) {
                excess[(i, j)] = base * (beta.exp() - 1.0);
            }
            cols.0.push(countries.label(i).into());
            cols.1.push(countries.label(k).into());
            cols.2.push(base * (beta * hv).exp());
            cols.3.push(base.ln());
            cols.4.push(hv);
        }
    }
    let data = Dataset::new()
        .with_categorical("residence", &cols.0)?
        .with_categorical("destination", &cols.1)?
        .with_numeric(FDI_INCOME, cols.2)?
        .with_numeric("ln_base", cols.3)?
        .with_numeric("haven", cols.4)?;
    Ok((data, excess))
}

#[derive(Debug, Clone, Serialize)]
pub struct ImputedMp {
    #[serde(with = "crate::serde_inf::matrix")]
    pub matrix: DMatrix<f64>,
    pub slope: f64,
    pub se: f64,
    pub imputed: usize,
}

/// Fills missing (`NaN`) MP cells from a regression of log MP sales on log
/// M&A counts with origin and destination effects. Missing cells without
/// any M&A become structural zeros.
pub fn impute_mp(mp_partial: &DMatrix<f64>, mna: &DMatrix<f64>) -> Result<ImputedMp> {
    let n = mp_partial.nrows();
    if mp_partial.shape() != mna.shape() || mp_partial.ncols() != n {
        return Err(ModelError::Dimension("MP and M&A matrices must be square and equal in size".into()));
    }
    if let Some(i) = (0..n).find(|i| mp_partial.row(*i).iter().all(|v| v.is_nan())) {
        return Err(ModelError::Input(format!("MP row {i} is entirely missing")));
    }
    let missing = mp_partial.iter().any(|v| v.is_nan());
    if !missing {
        return Ok(ImputedMp { matrix: mp_partial.clone(), slope: f64::NAN, se: f64::NAN, imputed: 0 });
    }
    let (mut y, mut x, mut o, mut d) = (vec![], vec![], vec![], vec![]);
    for i in 0..n {
        for l in 0..n {
            let v = mp_partial[(i, l)];
            if v > 0.0 && mna[(i, l)] > 0.0 {
                y.push(v.ln());
                x.push(mna[(i, l)].ln());
                o.push(i.to_string());
                d.push(l.to_string());
            }
        }
    }
    let data = Dataset::new()
        .with_numeric("ln_mp", y)?
        .with_numeric("ln_mna", x)?
        .with_categorical("origin", &o)?
        .with_categorical("dest", &d)?;
    let f = fit(&data, &RegressionSpec::ols("ln_mp").covariate("ln_mna").fe(&["origin"]).fe(&["dest"]))?;
    let slope = f.coef("ln_mna").ok_or_else(|| ModelError::Input("M&A slope not identified".into()))?;
    let fe = |name: &str, k: usize| -> Option<f64> {
        let e = f.fixed_effects.iter().find(|e| e.name == name)?;
        let key = k.to_string();
        e.levels.iter().position(|l| *l == key).map(|p| e.values[p])
    };
    let mut matrix = mp_partial.clone();
    let mut imputed = 0;
    for i in 0..n {
        for l in 0..n {
            if !mp_partial[(i, l)].is_nan() {
                continue;
            }
            matrix[(i, l)] = if mna[(i, l)] > 0.0 {
                match (fe("origin", i), fe("dest", l)) {
                    (Some(a), Some(b)) => {
                        imputed += 1;
                        (a + b + slope * mna[(i, l)].ln()).exp()
                    }
                    _ => {
                        log::warn!("MP cell ({i}, {l}) has no identified effects; set to zero");
                        0.0
                    }
                }
            } else {
                0.0
            };
        }
    }
    Ok(ImputedMp { matrix, slope, se: f.se("ln_mna").unwrap_or(f64::NAN), imputed })
}

/// True pre-tax shifted profits with options `1 + h`, for recovery checks.
pub fn true_shifting(eq: &Equilibrium) -> Tensor3 {
    let mut t = eq.pretax.clone();
    for i in 0..t.n {
        for l in 0..t.n {
            t.set(i, l, 0, 0.0);
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn micro_world_is_fast_and_deterministic() {
        let start = std::time::Instant::now();
        let a = generate_world(&SyntheticSpec::micro(5)).unwrap();
        assert!(start.elapsed().as_secs_f64() < 1.0);
        let b = generate_world(&SyntheticSpec::micro(5)).unwrap();
        assert_eq!(a.world, b.world);
        assert_eq!(a.baseline.wages, b.baseline.wages);
        assert_eq!(a.observed.trade, b.observed.trade);
    }

    #[test]
    fn medians_hit_targets() {
        let s = generate_world(&SyntheticSpec::ten_country(7)).unwrap();
        assert!((median_mp_friction(&s.world.mp_frictions) - 1.40).abs() < 1e-12);
        assert!((s.baseline.shifted_world() / 397.0 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn complete_matrix_passes_through() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let r = impute_mp(&m, &DMatrix::from_element(2, 2, 1.0)).unwrap();
        assert_eq!(r.matrix, m);
    }

    #[test]
    fn imputation_recovers_slope_and_keeps_zeros() {
        let n = 12;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let o: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let d: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let mna = DMatrix::from_fn(n, n, |_, _| (1.0 + 50.0 * rng.random::<f64>()).round());
        let mut mp = DMatrix::from_fn(n, n, |i, l| (o[i] + d[l] + 0.508 * mna[(i, l)].ln() + noise.sample(&mut rng)).exp());
        let mut mna = mna;
        mp[(0, 1)] = f64::NAN;
        mp[(2, 3)] = f64::NAN;
        mna[(2, 3)] = 0.0;
        let r = impute_mp(&mp, &mna).unwrap();
        assert!((r.slope - 0.508).abs() < 3.0 * r.se, "{} ± {}", r.slope, r.se);
        assert_eq!(r.matrix[(2, 3)], 0.0);
        assert!(r.matrix[(0, 1)] > 0.0);
        assert_eq!(r.imputed, 1);
    }

    #[test]
    fn all_missing_row_is_an_error() {
        let mut m = DMatrix::from_element(2, 2, 1.0);
        m[(1, 0)] = f64::NAN;
        m[(1, 1)] = f64::NAN;
        assert!(impute_mp(&m, &DMatrix::from_element(2, 2, 1.0)).is_err());
    }
}
