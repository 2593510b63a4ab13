//! End-to-end calibration: shifted profits from the income panel,
//! elasticities, triangulation, friction back-out and world rebuild.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use shiftsim_estimators::elasticities::{estimate_upsilon1, estimate_upsilon2_iterative, ShareDesign};
use shiftsim_estimators::{Dataset, RegressionSpec};

use crate::choice::{log_profit_constant, variable_elasticity_frictions};
use crate::country::CountrySet;
use crate::equilibrium::snapshot;
use crate::error::{ModelError, Result, StageContext};
use crate::frictions::{
    backout_alpha_theta, backout_gamma_a, backout_trade_costs, decompose_cost, median_cost, median_mp_friction,
    CostDecomposition, MpBackout, ShiftingBackout, SourceConditions, TradeBackout,
};
use crate::regime::{RateTable, TaxRegime};
use crate::tensor::Tensor3;
use crate::triangulation::{
    conduit_correct, estimate_ps_ih, quantify_ps_l, triangulate, Attraction, ConduitCorrection, PsLMethod,
    ShiftingDecomposition, TriangulationOptions,
};
use crate::world::{Elasticities, WorldCalibration};

/// Everything the pipeline reads.
#[derive(Debug, Clone)]
pub struct ObservedData {
    pub countries: CountrySet,
    pub sigma: f64,
    /// Origin × destination, own trade on the diagonal.
    pub trade: DMatrix<f64>,
    pub expenditure: Vec<f64>,
    pub wages: Vec<f64>,
    /// Sales of residence `i`'s firms produced and booked in `l`.
    pub mp_sales: DMatrix<f64>,
    /// Pre-tax profits reported where they are produced.
    pub reported_profits: Vec<f64>,
    pub fdi_panel: Dataset,
    pub fdi_covariates: Vec<String>,
    pub haven_terms: Vec<String>,
    /// Source totals of shifted profits when supplied externally.
    pub ps_l: Option<Vec<f64>>,
    pub tax_domestic: Vec<f64>,
    pub tax_haven: Vec<f64>,
    pub distance: DMatrix<f64>,
    /// Source-level productivity shifter used as a control.
    pub tech_covariate: Vec<f64>,
    pub haven_index: Vec<f64>,
    pub conduit: Option<ConduitCorrection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineOptions {
    pub upsilon1_fixed: Option<f64>,
    pub upsilon2_fixed: Option<f64>,
    pub upsilon2_start: f64,
    pub upsilon2_tol: f64,
    pub max_rounds: usize,
    pub ps_l_method: Option<PsLMethod>,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            upsilon1_fixed: None,
            upsilon2_fixed: None,
            upsilon2_start: 40.0,
            upsilon2_tol: 1e-9,
            max_rounds: 500,
            ps_l_method: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub upsilon1: f64,
    pub upsilon1_se: f64,
    pub upsilon2: f64,
    pub upsilon2_se: f64,
    pub upsilon2_rounds: usize,
    pub upsilon2_trace: Vec<f64>,
    pub ps_world: f64,
    pub median_gamma: f64,
    pub median_cost: f64,
    pub alpha_variance_share: f64,
    pub trade_asymmetry: f64,
    pub triangulation_residual: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Calibration {
    pub world: WorldCalibration,
    pub trade: TradeBackout,
    pub mp: MpBackout,
    pub shifting: ShiftingBackout,
    pub cost: CostDecomposition,
    pub decomposition: ShiftingDecomposition,
    /// Pre-tax shifted profits on options `1 + h`.
    pub ps_flows: Tensor3,
    pub report: CalibrationReport,
}

pub const COL_SHARE: &str = "share";
pub const COL_TAX: &str = "tax";
pub const COL_RESIDENCE: &str = "residence";
pub const COL_SOURCE: &str = "source";

fn wedges(obs: &ObservedData, ps_l: &[f64]) -> Vec<f64> {
    (0..obs.countries.len())
        .map(|l| {
            let q: f64 = obs.trade.row(l).sum();
            obs.sigma * (obs.reported_profits[l] + ps_l[l]) / q
        })
        .collect()
}

/// Pre-tax tax-base shares with gravity controls.
pub fn tax_base_dataset(obs: &ObservedData, xi: &[f64], wedge: &[f64]) -> Result<Dataset> {
    let c = &obs.countries;
    let n = c.len();
    let mut cols: [Vec<f64>; 8] = Default::default();
    let mut res = Vec::new();
    for i in 0..n {
        let total: f64 = (0..n).map(|l| obs.mp_sales[(i, l)] * wedge[l]).sum();
        for l in 0..n {
            let x = obs.mp_sales[(i, l)];
            if !(x > 0.0) {
                continue;
            }
            res.push(c.label(i).to_string());
            let row = [
                x * wedge[l] / total,
                obs.tax_domestic[l],
                obs.distance[(i, l)].ln(),
                if i == l { 1.0 } else { 0.0 },
                obs.tech_covariate[l],
                obs.wages[l].ln(),
                xi[l].ln(),
                wedge[l].ln(),
            ];
            for (col, v) in cols.iter_mut().zip(row) {
                col.push(v);
            }
        }
    }
    let names = [COL_SHARE, COL_TAX, "ln_dist", "home", "tech", "ln_wage", "ln_xi", "ln_wedge"];
    let mut d = Dataset::new().with_categorical(COL_RESIDENCE, &res)?;
    for (name, col) in names.iter().zip(cols) {
        d.add_numeric(name, col)?;
    }
    Ok(d)
}

pub fn tax_base_design() -> ShareDesign {
    ShareDesign::tax_base(COL_SHARE, COL_TAX, COL_RESIDENCE, &["ln_dist", "home", "tech", "ln_wage", "ln_xi", "ln_wedge"])
}

/// Shares of each residence's shifted profits by (source, haven).
pub fn shifting_dataset(obs: &ObservedData, ps: &Tensor3) -> Result<Dataset> {
    let c = &obs.countries;
    let n = c.len();
    let havens = c.havens();
    let (mut share, mut tax, mut dist, mut index, mut res, mut src) = (vec![], vec![], vec![], vec![], vec![], vec![]);
    for i in 0..n {
        let total = ps.residence_total(i) - (0..n).map(|l| ps.get(i, l, 0)).sum::<f64>();
        if !(total > 0.0) {
            continue;
        }
        for l in 0..n {
            for (j, &h) in havens.iter().enumerate() {
                let v = ps.get(i, l, j + 1);
                if v > 0.0 {
                    share.push(v / total);
                    tax.push(obs.tax_haven[j]);
                    dist.push(obs.distance[(l, h)].ln());
                    index.push(obs.haven_index[j]);
                    res.push(c.label(i).to_string());
                    src.push(c.label(l).to_string());
                }
            }
        }
    }
    Ok(Dataset::new()
        .with_numeric(COL_SHARE, share)?
        .with_numeric(COL_TAX, tax)?
        .with_numeric("ln_dist", dist)?
        .with_numeric("haven_index", index)?
        .with_categorical(COL_RESIDENCE, &res)?
        .with_categorical(COL_SOURCE, &src)?)
}

pub fn shifting_design() -> ShareDesign {
    ShareDesign::shifting(COL_SHARE, COL_TAX, COL_RESIDENCE, COL_SOURCE, &["ln_dist", "haven_index"])
}

pub fn fdi_spec(obs: &ObservedData) -> RegressionSpec {
    let mut spec = RegressionSpec::ppml("income").fe(&["residence"]);
    for c in obs.fdi_covariates.iter().chain(&obs.haven_terms) {
        spec = spec.covariate(c);
    }
    spec
}

fn check_inputs(obs: &ObservedData) -> Result<()> {
    let n = obs.countries.len();
    let h = obs.countries.n_havens();
    let ok = obs.trade.shape() == (n, n)
        && obs.mp_sales.shape() == (n, n)
        && obs.distance.shape() == (n, n)
        && [&obs.expenditure, &obs.wages, &obs.reported_profits, &obs.tax_domestic, &obs.tech_covariate]
            .iter()
            .all(|v| v.len() == n)
        && obs.tax_haven.len() == h
        && obs.haven_index.len() == h;
    if !ok {
        return Err(ModelError::Dimension("observed inputs do not match the country set".into()));
    }
    Ok(())
}

pub fn calibrate(obs: &ObservedData, opts: &PipelineOptions) -> Result<Calibration> {
    check_inputs(obs).stage("inputs")?;
    if obs.fdi_panel.nrows() == 0 {
        return Err(ModelError::Input("missing input".into())).stage("ps_ih");
    }
    let c = &obs.countries;
    let n = c.len();
    let sigma = obs.sigma;
    let mut warnings = Vec::new();

    let trade = backout_trade_costs(&obs.trade, &obs.expenditure, sigma, c.numeraire).stage("trade_costs")?;

    let ps = estimate_ps_ih(&obs.fdi_panel, &fdi_spec(obs), c, &obs.haven_terms.iter().map(String::as_str).collect::<Vec<_>>())
        .stage("ps_ih")?;
    warnings.extend(ps.warnings.iter().cloned());
    let mut ps_ih = ps.ps_ih.clone();
    if let Some(cc) = &obs.conduit {
        let r = conduit_correct(&ps_ih, cc).stage("conduit")?;
        warnings.extend(r.warnings);
        ps_ih = r.ps_ih;
    }
    let ps_i: Vec<f64> = ps_ih.row_iter().map(|r| r.sum()).collect();
    let ps_world: f64 = ps_i.iter().sum();

    let production: Vec<f64> = (0..n).map(|l| obs.trade.row(l).sum()).collect();
    let method = match (&opts.ps_l_method, &obs.ps_l) {
        (Some(m), _) => m.clone(),
        (None, Some(v)) => PsLMethod::External { ps_l: v.clone() },
        (None, None) => PsLMethod::Intensity { size: obs.expenditure.clone() },
    };
    let (_, ps_l) = quantify_ps_l(c, &production, &obs.reported_profits, ps_world, &method).stage("ps_l")?;
    let wedge = wedges(obs, &ps_l);

    let (upsilon1, upsilon1_se) = match opts.upsilon1_fixed {
        Some(v) => (v, f64::NAN),
        None => {
            let data = tax_base_dataset(obs, &trade.xi, &wedge).stage("upsilon1")?;
            let e = estimate_upsilon1(&data, &tax_base_design(), sigma).stage("upsilon1")?;
            (e.upsilon, e.se * (sigma - 1.0))
        }
    };

    let tri_opts = TriangulationOptions::default();
    let run_triangulation = |v2: f64| {
        triangulate(c, &ps_i, &ps_l, &ps_ih, &Attraction::MpSales(obs.mp_sales.clone()), upsilon1, v2, &tri_opts)
    };
    let flows_of = |d: &ShiftingDecomposition| {
        let mut t = d.ps_ilh();
        for i in 0..n {
            for l in 0..n {
                t.set(i, l, 0, 0.0);
            }
        }
        t
    };
    let (upsilon2, upsilon2_se, rounds, trace) = match opts.upsilon2_fixed {
        Some(v) => (v, f64::NAN, 0, vec![v]),
        None => {
            let it = estimate_upsilon2_iterative(
                opts.upsilon2_start,
                sigma,
                &shifting_design(),
                opts.upsilon2_tol,
                opts.max_rounds,
                |v2| {
                    let d = run_triangulation(v2).map_err(|e| e.to_string())?;
                    shifting_dataset(obs, &flows_of(&d)).map_err(|e| e.to_string())
                },
            )
            .stage("upsilon2")?;
            (it.upsilon2, it.estimate.se * (sigma - 1.0), it.iterations, it.trace)
        }
    };
    let decomposition = run_triangulation(upsilon2).stage("triangulate")?;
    warnings.extend(decomposition.warnings.iter().cloned());
    let ps_flows = flows_of(&decomposition);

    let el = Elasticities::new(sigma, upsilon1, upsilon2);
    let cond = SourceConditions {
        countries: c,
        elasticities: el,
        wages: &obs.wages,
        xi: &trade.xi,
        wedge: &wedge,
        tax_domestic: &obs.tax_domestic,
        tax_haven: &obs.tax_haven,
    };
    let mp = backout_gamma_a(&obs.mp_sales, &cond).stage("mp_frictions")?;
    let shifting = backout_alpha_theta(&ps_flows, &obs.mp_sales, &mp, &cond).stage("ps_frictions")?;
    warnings.extend(shifting.flags.iter().cloned());
    let cost = decompose_cost(c, &shifting.cost).stage("cost_decomposition")?;

    let world = rebuild_world(obs, &trade, &mp, &shifting, &wedge, &ps_flows, el).stage("rebuild")?;
    for w in &warnings {
        log::warn!("{w}");
    }
    let report = CalibrationReport {
        upsilon1,
        upsilon1_se,
        upsilon2,
        upsilon2_se,
        upsilon2_rounds: rounds,
        upsilon2_trace: trace,
        ps_world,
        median_gamma: median_mp_friction(&mp.gamma),
        median_cost: median_cost(&shifting.cost),
        alpha_variance_share: cost.alpha_share,
        trade_asymmetry: trade.asymmetry,
        triangulation_residual: decomposition.step_c_residual,
        warnings,
    };
    Ok(Calibration { world, trade, mp, shifting, cost, decomposition, ps_flows, report })
}

/// Firm masses, entry costs, labor and imbalances that make the observed
/// point an equilibrium of the backed-out frictions, in both runs.
fn rebuild_world(
    obs: &ObservedData,
    trade: &TradeBackout,
    mp: &MpBackout,
    shifting: &ShiftingBackout,
    wedge: &[f64],
    ps_flows: &Tensor3,
    el: Elasticities,
) -> Result<WorldCalibration> {
    let c = &obs.countries;
    let n = c.len();
    let mut world = WorldCalibration {
        countries: c.clone(),
        elasticities: el,
        labor: vec![1.0; n],
        tech: mp.tech.clone(),
        wedge: wedge.to_vec(),
        trade_frictions: trade.tau.clone(),
        mp_frictions: mp.gamma.clone(),
        ps_frictions: DMatrix::from_fn(n, c.n_havens(), |l, j| if c.is_haven(l) { f64::INFINITY } else { shifting.alpha[(l, j)] }),
        aggressiveness: shifting.theta.clone(),
        theta_bar: shifting.theta_bar,
        tax_domestic: obs.tax_domestic.clone(),
        tax_haven: obs.tax_haven.clone(),
        imbalances: vec![0.0; n],
        entry_cost: vec![1.0; n],
        firm_mass: vec![1.0; n],
    };
    let rates = RateTable::build(&world, &TaxRegime::Territorial)?;
    let frictions = variable_elasticity_frictions(&world, &rates);
    let probe = snapshot(&world, &rates, &frictions, &obs.wages, &obs.expenditure, &trade.price, &vec![1.0; n])?;
    log_profit_constant(&el)?;
    for i in 0..n {
        let own: f64 = (0..n).map(|l| obs.mp_sales[(i, l)] * wedge[l] * (1.0 - obs.tax_domestic[l]) / el.sigma).sum();
        let shifted: f64 = (0..n)
            .flat_map(|l| (0..c.n_havens()).map(move |j| (l, j)))
            .map(|(l, j)| ps_flows.get(i, l, j + 1) * (1.0 - obs.tax_haven[j]))
            .sum();
        world.firm_mass[i] = (own + shifted) / probe.profit[i];
        world.entry_cost[i] = probe.profit[i] / obs.wages[i];
    }
    let s = snapshot(&world, &rates, &frictions, &obs.wages, &obs.expenditure, &trade.price, &world.firm_mass)?;
    for k in 0..n {
        let w = obs.wages[k];
        world.labor[k] = (world.firm_mass[k] * s.profit[k] + (el.sigma - 1.0) * s.production[k] / el.sigma) / w;
        world.imbalances[k] = obs.expenditure[k]
            - (w * world.labor[k] + s.revenue[k] + (1.0 - wedge[k]) * s.production[k] / el.sigma);
    }
    Ok(world)
}

/// Sup-norm gaps between model shares at the observed point and data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShareGaps {
    pub trade: f64,
    pub mp: f64,
    pub ps: f64,
}

impl ShareGaps {
    pub fn max(&self) -> f64 {
        self.trade.max(self.mp).max(self.ps)
    }
}

/// Evaluates the rebuilt world at observed wages, expenditures and the
/// backed-out prices and compares trade column shares, residence MP
/// shares and residence shifted-profit shares with `trade`, `mp_sales`
/// and `ps_flows`.
pub fn share_gaps(
    world: &WorldCalibration,
    wages: &[f64],
    expenditure: &[f64],
    price: &[f64],
    trade: &DMatrix<f64>,
    mp_sales: &DMatrix<f64>,
    ps_flows: &Tensor3,
) -> Result<ShareGaps> {
    let n = world.n();
    let rates = RateTable::build(world, &TaxRegime::Territorial)?;
    let frictions = variable_elasticity_frictions(world, &rates);
    let s = snapshot(world, &rates, &frictions, wages, expenditure, price, &world.firm_mass)?;
    let model_trade = crate::equilibrium::trade_matrix(world, &s.log_xi, expenditure, price, &s.production);
    let col = |m: &DMatrix<f64>, l: usize, k: usize| m[(l, k)] / m.column(k).sum();
    let mut gaps = ShareGaps { trade: 0.0, mp: 0.0, ps: 0.0 };
    for l in 0..n {
        for k in 0..n {
            gaps.trade = gaps.trade.max((col(&model_trade, l, k) - col(trade, l, k)).abs());
        }
    }
    for i in 0..n {
        let mt: f64 = (0..n).map(|l| s.sales.get(i, l, 0)).sum();
        let dt: f64 = mp_sales.row(i).sum();
        let ps_m: f64 = (0..n).map(|l| s.pretax.cell(i, l)[1..].iter().sum::<f64>()).sum();
        let ps_d: f64 = (0..n).map(|l| ps_flows.cell(i, l)[1..].iter().sum::<f64>()).sum();
        let own_m: f64 = (0..n).map(|l| s.pretax.get(i, l, 0)).sum();
        for l in 0..n {
            gaps.mp = gaps.mp.max((s.sales.get(i, l, 0) / mt - mp_sales[(i, l)] / dt).abs());
            for o in 1..s.pretax.options {
                let a = if ps_m > 0.0 { s.pretax.get(i, l, o) / ps_m } else { 0.0 };
                let b = if ps_d > 0.0 { ps_flows.get(i, l, o) / ps_d } else { 0.0 };
                gaps.ps = gaps.ps.max((a - b).abs());
            }
        }
        // The shifted share of residence profits is a share too.
        let dm = ps_m / (ps_m + own_m);
        let own_d: f64 = (0..n).map(|l| mp_sales[(i, l)] * world.wedge[l] / world.elasticities.sigma).sum();
        let dd = ps_d / (ps_d + own_d);
        gaps.ps = gaps.ps.max((dm - dd).abs());
    }
    Ok(gaps)
}
