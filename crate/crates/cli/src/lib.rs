//! Batch driver: configuration, commands and their file outputs.

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use shiftsim_core::calibrate::{calibrate, fdi_spec, PipelineOptions};
use shiftsim_core::equilibrium::{solve_baseline, Equilibrium, Mode};
use shiftsim_core::error::{ModelError, StageContext};
use shiftsim_core::io::{
    read_observed, read_world, sankey, write_json, write_matrix_csv, write_observed, write_outcomes_csv,
    write_revenue_decomposition_csv, write_summary_csv, write_welfare_decomposition_csv,
};
use shiftsim_core::regime::TaxRegime;
use shiftsim_core::scenarios::{nash_deviation_scan, run_grid, NashRow, ReformResult, ScenarioSpec};
use shiftsim_core::synthetic::{generate_world, SyntheticSpec};
use shiftsim_core::triangulation::estimate_ps_ih;
use shiftsim_core::world::{validate_world, WorldCalibration};

pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_CONVERGENCE: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{failed} of {total} scenario runs failed")]
    ScenariosFailed { failed: usize, total: usize },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_VALIDATION,
            CliError::Io { .. } => EXIT_IO,
            CliError::ScenariosFailed { .. } => EXIT_CONVERGENCE,
            CliError::Model(e) => model_exit_code(e.root()),
        }
    }
}

fn model_exit_code(e: &ModelError) -> i32 {
    use shiftsim_estimators::EstimationError;
    match e {
        ModelError::Convergence { .. }
        | ModelError::NonFinite(_)
        | ModelError::LaborInfeasible(_)
        | ModelError::NegativeExpenditure(_)
        | ModelError::Estimation(EstimationError::NoConvergence { .. }) => EXIT_CONVERGENCE,
        ModelError::Io(_) | ModelError::Csv(_) | ModelError::Json(_) => EXIT_IO,
        _ => EXIT_VALIDATION,
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeChoice {
    Short,
    Long,
    #[default]
    Both,
}

impl ModeChoice {
    pub fn modes(self) -> Vec<Mode> {
        match self {
            ModeChoice::Short => vec![Mode::ShortRun],
            ModeChoice::Long => vec![Mode::LongRun],
            ModeChoice::Both => vec![Mode::ShortRun, Mode::LongRun],
        }
    }
}

/// Elasticity overrides. In `calibrate` the upsilons replace the estimates;
/// in `simulate` and `decompose` they replace the values stored in the world.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Overrides {
    pub sigma: Option<f64>,
    pub upsilon1: Option<f64>,
    pub upsilon2: Option<f64>,
    pub shape_k: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(flatten)]
    pub spec: ScenarioSpec,
}

impl ScenarioEntry {
    pub fn id(&self) -> String {
        self.id.clone().unwrap_or_else(|| self.spec.id())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Observed-data bundle directory (`calibrate`, `estimate`).
    pub data: Option<PathBuf>,
    /// Calibrated world (`simulate`, `decompose`).
    pub world: Option<PathBuf>,
    pub output: PathBuf,
    pub overrides: Overrides,
    pub scenarios: Vec<ScenarioEntry>,
    pub mode: ModeChoice,
    /// Country code the summary table reports on; defaults to the largest economy.
    pub report_country: Option<String>,
    pub threads: Option<usize>,
    pub verbosity: Option<String>,
    pub seed: u64,
    pub synthetic: Option<SyntheticSpec>,
    /// `decompose` also runs the rate-deviation scan.
    pub nash: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            world: None,
            output: PathBuf::from("out"),
            overrides: Overrides::default(),
            scenarios: Vec::new(),
            mode: ModeChoice::Both,
            report_country: None,
            threads: None,
            verbosity: None,
            seed: 1,
            synthetic: None,
            nash: false,
        }
    }
}

impl RunConfig {
    /// TOML unless the text parses as a JSON object.
    pub fn parse(text: &str) -> Result<Self> {
        if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
        } else {
            toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| CliError::Io { path: path.into(), source })?;
        Self::parse(&text)
    }

    pub fn check_scenarios(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for s in &self.scenarios {
            let id = s.id();
            if !seen.insert(id.clone()) {
                return Err(CliError::Config(format!("duplicate scenario id {id:?}")));
            }
        }
        Ok(())
    }

    fn require(path: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
        let p = path.clone().ok_or_else(|| CliError::Config(format!("no {what} given")))?;
        if !p.exists() {
            return Err(CliError::Config(format!("{what} {} does not exist", p.display())));
        }
        Ok(p)
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|source| CliError::Io { path: path.into(), source })
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.output).map_err(|source| CliError::Io { path: cfg.output.clone(), source })?;
    Ok(&cfg.output)
}

/// Generates a synthetic world and writes its observed bundle plus the truth.
pub fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let spec = SyntheticSpec { seed: cfg.seed, ..cfg.synthetic.clone().unwrap_or_default() };
    let sw = generate_world(&spec)?;
    let out = out_dir(cfg)?;
    write_observed(&out.join("data"), &sw.observed)?;
    write_json(&out.join("truth_world.json"), &sw.world)?;
    write_json(&out.join("synthetic_spec.json"), &spec)?;
    let labels = sw.world.countries.labels.clone();
    let havens: Vec<String> = sw.world.countries.havens().into_iter().map(|k| labels[k].clone()).collect();
    write_matrix_csv(create(&out.join("truth_ps_ih.csv"))?, &labels, &havens, &sw.ps_ih)?;
    log::info!("synthetic world: {} countries, PS^W = {:.3}", labels.len(), sw.baseline.shifted_world());
    Ok(())
}

#[derive(Debug, Serialize)]
struct PsIhSummary<'a> {
    ps_world: f64,
    ps_i: &'a [f64],
    coefficients: Vec<(String, f64, f64)>,
    warnings: &'a [String],
}

/// Excess-income estimation of shifted profits by residence and haven.
pub fn cmd_estimate(cfg: &RunConfig) -> Result<()> {
    let dir = RunConfig::require(&cfg.data, "data directory")?;
    let obs = read_observed(&dir)?;
    if obs.fdi_panel.nrows() == 0 {
        return Err(ModelError::Input("missing input".into())).stage("ps_ih").map_err(Into::into);
    }
    let terms: Vec<&str> = obs.haven_terms.iter().map(String::as_str).collect();
    let est = estimate_ps_ih(&obs.fdi_panel, &fdi_spec(&obs), &obs.countries, &terms).stage("ps_ih")?;
    let out = out_dir(cfg)?;
    let labels = obs.countries.labels.clone();
    let havens: Vec<String> = obs.countries.havens().into_iter().map(|k| labels[k].clone()).collect();
    write_matrix_csv(create(&out.join("ps_ih.csv"))?, &labels, &havens, &est.ps_ih)?;
    let fit = &est.fit;
    let coefficients =
        fit.names.iter().zip(fit.coefficients.iter()).zip(fit.std_errors.iter()).map(|((n, b), s)| (n.clone(), *b, *s)).collect();
    let summary = PsIhSummary { ps_world: est.ps_world, ps_i: &est.ps_i, coefficients, warnings: &est.warnings };
    write_json(&out.join("ps_ih_estimate.json"), &summary)?;
    Ok(())
}

/// Full calibration pipeline from an observed bundle.
pub fn cmd_calibrate(cfg: &RunConfig) -> Result<()> {
    // The excess-income stage is written first so it survives a later failure.
    cmd_estimate(cfg)?;
    let dir = RunConfig::require(&cfg.data, "data directory")?;
    let mut obs = read_observed(&dir)?;
    if let Some(s) = cfg.overrides.sigma {
        obs.sigma = s;
    }
    let opts = PipelineOptions {
        upsilon1_fixed: cfg.overrides.upsilon1,
        upsilon2_fixed: cfg.overrides.upsilon2,
        ..PipelineOptions::default()
    };
    let cal = calibrate(&obs, &opts)?;
    let out = out_dir(cfg)?;
    write_json(&out.join("world.json"), &cal.world)?;
    write_json(&out.join("calibration_report.json"), &cal.report)?;
    write_json(&out.join("shifting_decomposition.json"), &cal.decomposition)?;
    let labels = obs.countries.labels.clone();
    let havens: Vec<String> = obs.countries.havens().into_iter().map(|k| labels[k].clone()).collect();
    write_matrix_csv(create(&out.join("ps_lh.csv"))?, &labels, &havens, &cal.decomposition.ps_lh)?;
    write_matrix_csv(create(&out.join("s_il.csv"))?, &labels, &labels, &cal.decomposition.s_il)?;
    write_matrix_csv(create(&out.join("alpha.csv"))?, &labels, &havens, &cal.shifting.alpha)?;
    write_matrix_csv(create(&out.join("gamma.csv"))?, &labels, &labels, &cal.mp.gamma)?;
    for w in &cal.report.warnings {
        log::warn!("{w}");
    }
    Ok(())
}

fn load_world(cfg: &RunConfig) -> Result<WorldCalibration> {
    let path = RunConfig::require(&cfg.world, "world file")?;
    let mut w = read_world(&path)?;
    let o = cfg.overrides;
    let el = &mut w.elasticities;
    el.sigma = o.sigma.unwrap_or(el.sigma);
    el.upsilon1 = o.upsilon1.unwrap_or(el.upsilon1);
    el.upsilon2 = o.upsilon2.unwrap_or(el.upsilon2);
    el.shape_k = o.shape_k.unwrap_or(el.shape_k);
    let v = validate_world(&w);
    if !v.is_empty() {
        return Err(ModelError::InvalidWorld(v).into());
    }
    Ok(w)
}

fn report_country(cfg: &RunConfig, world: &WorldCalibration, base: &Equilibrium) -> Result<usize> {
    match &cfg.report_country {
        Some(code) => world.countries.index_of(code).ok_or_else(|| CliError::Config(format!("unknown country {code:?}"))),
        None => Ok((0..world.n()).max_by(|a, b| base.expenditure[*a].total_cmp(&base.expenditure[*b])).unwrap_or(0)),
    }
}

#[derive(Debug, Serialize)]
struct RunStatus {
    id: String,
    mode: Mode,
    ok: bool,
    residual: Option<f64>,
    error: Option<String>,
    warnings: Vec<String>,
}

#[derive(Debug, Serialize)]
struct RunSummary {
    baseline_residual: f64,
    report_country: String,
    runs: Vec<RunStatus>,
}

/// Solves the baseline and every scenario; failed runs are reported and
/// skipped in the tables.
fn run_all(cfg: &RunConfig, world: &WorldCalibration) -> Result<(Equilibrium, Vec<ReformResult>, Vec<RunStatus>)> {
    cfg.check_scenarios()?;
    let base = solve_baseline(world, &TaxRegime::Territorial)?;
    let specs: Vec<ScenarioSpec> = cfg.scenarios.iter().map(|s| s.spec.clone()).collect();
    let modes = cfg.mode.modes();
    let grid = run_grid(world, &base, &specs, &modes);
    let mut results = Vec::new();
    let mut status = Vec::new();
    // The grid is ordered scenario-major, mode-minor.
    for (k, (_, mode, r)) in grid.into_iter().enumerate() {
        let entry = &cfg.scenarios[k / modes.len()];
        match r {
            Ok(mut r) => {
                r.id = entry.id();
                status.push(RunStatus { id: r.id.clone(), mode, ok: true, residual: Some(r.residual), error: None, warnings: r.warnings.clone() });
                results.push(r);
            }
            Err(e) => {
                log::error!("{} ({mode:?}) failed: {e}", entry.id());
                status.push(RunStatus { id: entry.id(), mode, ok: false, residual: None, error: Some(e.to_string()), warnings: vec![] });
            }
        }
    }
    Ok((base, results, status))
}

fn failures(status: &[RunStatus]) -> Result<()> {
    let failed = status.iter().filter(|s| !s.ok).count();
    if failed > 0 {
        return Err(CliError::ScenariosFailed { failed, total: status.len() });
    }
    Ok(())
}

fn write_decompositions(out: &Path, world: &WorldCalibration, results: &[ReformResult]) -> Result<()> {
    write_revenue_decomposition_csv(create(&out.join("revenue_decomposition.csv"))?, &world.countries, results)?;
    write_welfare_decomposition_csv(create(&out.join("welfare_decomposition.csv"))?, &world.countries, results)?;
    Ok(())
}

/// Baseline plus scenario grid: per-country deltas, summary panel,
/// decompositions and flow data for Sankey diagrams.
pub fn cmd_simulate(cfg: &RunConfig) -> Result<()> {
    let world = load_world(cfg)?;
    let (base, results, status) = run_all(cfg, &world)?;
    let country = report_country(cfg, &world, &base)?;
    let out = out_dir(cfg)?;
    write_outcomes_csv(create(&out.join("outcomes.csv"))?, &world.countries, &results)?;
    write_summary_csv(create(&out.join("summary.csv"))?, country, &results)?;
    write_decompositions(out, &world, &results)?;
    write_json(&out.join("sankey.json"), &sankey(&world.countries, &base))?;
    let summary = RunSummary { baseline_residual: base.residual, report_country: world.countries.label(country).into(), runs: status };
    write_json(&out.join("summary.json"), &summary)?;
    failures(&summary.runs)
}

/// Partial-versus-general decompositions, optionally with the rate-deviation scan.
pub fn cmd_decompose(cfg: &RunConfig) -> Result<()> {
    let world = load_world(cfg)?;
    let (base, results, status) = run_all(cfg, &world)?;
    let out = out_dir(cfg)?;
    write_decompositions(out, &world, &results)?;
    if cfg.nash {
        let mut rows: Vec<(String, Mode, Vec<NashRow>)> = Vec::new();
        let baseline = nash_deviation_scan(&world, &base, &base.regime, Mode::LongRun, None)?;
        let mut alphas = vec![0.0; world.n()];
        for r in &baseline {
            alphas[r.country] = r.alpha;
        }
        rows.push(("baseline".into(), Mode::LongRun, baseline));
        for entry in &cfg.scenarios {
            let (w_cf, r_cf) = entry.spec.apply(&world, &base.regime)?;
            for mode in cfg.mode.modes() {
                rows.push((entry.id(), mode, nash_deviation_scan(&w_cf, &base, &r_cf, mode, Some(&alphas))?));
            }
        }
        write_nash_csv(&out.join("nash.csv"), &world, &rows)?;
    }
    let summary = RunSummary { baseline_residual: base.residual, report_country: String::new(), runs: status };
    write_json(&out.join("summary.json"), &summary)?;
    failures(&summary.runs)
}

fn write_nash_csv(path: &Path, world: &WorldCalibration, rows: &[(String, Mode, Vec<NashRow>)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let io = |e: csv::Error| CliError::Model(e.into());
    w.write_record(["scenario", "mode", "code", "alpha", "corner", "dlog_welfare", "dlog_revenue", "derivative", "curvature", "concave"])
        .map_err(io)?;
    for (id, mode, scan) in rows {
        let mode = serde_json::to_value(mode).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
        for r in scan {
            w.write_record([
                id.clone(),
                mode.clone(),
                world.countries.label(r.country).to_string(),
                r.alpha.to_string(),
                r.corner.to_string(),
                r.dlog_welfare.to_string(),
                r.dlog_revenue.to_string(),
                r.derivative.to_string(),
                r.curvature.to_string(),
                r.concave.to_string(),
            ])
            .map_err(io)?;
        }
    }
    w.flush().map_err(|source| CliError::Io { path: path.into(), source })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_and_json_configs_agree() {
        let toml = r#"
            world = "w.json"
            mode = "long"
            [[scenarios]]
            kind = "min_tax"
            rate = 0.15
            rights = "residence"
            scope = "multilateral"
            [[scenarios]]
            id = "cut"
            kind = "unilateral_rate_change"
            country = 0
            relative = -0.05
        "#;
        let json = r#"{"world": "w.json", "mode": "long", "scenarios": [
            {"kind": "min_tax", "rate": 0.15, "rights": "residence", "scope": "multilateral"},
            {"id": "cut", "kind": "unilateral_rate_change", "country": 0, "relative": -0.05}]}"#;
        let a = RunConfig::parse(toml).unwrap();
        assert_eq!(a, RunConfig::parse(json).unwrap());
        assert_eq!(a.scenarios[0].id(), "min_tax_0.15_residence_multilateral");
        assert_eq!(a.scenarios[1].id(), "cut");
    }

    #[test]
    fn duplicate_ids_rejected() {
        let cfg = RunConfig::parse("[[scenarios]]\nkind = \"noop\"\n[[scenarios]]\nkind = \"noop\"\n").unwrap();
        assert_eq!(cfg.check_scenarios().unwrap_err().exit_code(), EXIT_VALIDATION);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::parse("wrold = \"x\"").is_err());
    }

    #[test]
    fn exit_codes_follow_the_root_cause() {
        let conv = ModelError::Convergence { what: "x", iterations: 1, residual: 1.0, trace: vec![] };
        let tagged: CliError = Err::<(), _>(conv).stage("upsilon2").unwrap_err().into();
        assert_eq!(tagged.exit_code(), EXIT_CONVERGENCE);
        let io: CliError = ModelError::Io(std::io::Error::other("x")).into();
        assert_eq!(io.exit_code(), EXIT_IO);
    }
}
