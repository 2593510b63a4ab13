use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use shiftsim_cli::{
    cmd_calibrate, cmd_decompose, cmd_estimate, cmd_simulate, cmd_synth, CliError, ModeChoice, RunConfig, ScenarioEntry,
};

#[derive(Parser)]
#[command(name = "shiftsim", version, about = "Profit-shifting general-equilibrium workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate frictions and elasticities from an observed bundle and write world.json.
    Calibrate,
    /// Solve the baseline and every configured scenario.
    Simulate,
    /// Generate a synthetic observed bundle with known truth.
    Synth {
        /// Use the variable-elasticity parameter set.
        #[arg(long)]
        variable: bool,
    },
    /// Excess-income estimate of shifted profits by residence and haven.
    Estimate,
    /// Partial-versus-general decompositions and the optional rate-deviation scan.
    Decompose {
        #[arg(long)]
        nash: bool,
    },
}

#[derive(Args)]
struct Common {
    /// TOML or JSON run configuration; flags below override it.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[arg(long, global = true)]
    world: Option<PathBuf>,
    #[arg(long, short, global = true)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, global = true)]
    mode: Option<Mode>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    upsilon1_fixed: Option<f64>,
    #[arg(long, global = true)]
    upsilon2_fixed: Option<f64>,
    /// Scenario as inline JSON, e.g. '{"kind":"noop"}'. Repeatable; replaces the config list.
    #[arg(long = "scenario", global = true)]
    scenarios: Vec<String>,
    /// Country code for the summary table.
    #[arg(long, global = true)]
    report_country: Option<String>,
    #[arg(long, short, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Mode {
    Short,
    Long,
    Both,
}

fn build_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let c = &cli.common;
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.data = c.data.clone().or(cfg.data);
    cfg.world = c.world.clone().or(cfg.world);
    if let Some(o) = &c.out {
        cfg.output = o.clone();
    }
    if let Some(m) = c.mode {
        cfg.mode = match m {
            Mode::Short => ModeChoice::Short,
            Mode::Long => ModeChoice::Long,
            Mode::Both => ModeChoice::Both,
        };
    }
    cfg.threads = c.threads.or(cfg.threads);
    cfg.seed = c.seed.unwrap_or(cfg.seed);
    cfg.overrides.upsilon1 = c.upsilon1_fixed.or(cfg.overrides.upsilon1);
    cfg.overrides.upsilon2 = c.upsilon2_fixed.or(cfg.overrides.upsilon2);
    cfg.report_country = c.report_country.clone().or(cfg.report_country);
    if !c.scenarios.is_empty() {
        cfg.scenarios = c
            .scenarios
            .iter()
            .map(|s| serde_json::from_str::<ScenarioEntry>(s).map_err(|e| CliError::Config(format!("scenario {s}: {e}"))))
            .collect::<Result<_, _>>()?;
    }
    match &cli.command {
        Command::Synth { variable: true } => {
            let mut spec = cfg.synthetic.clone().unwrap_or_default();
            spec.elasticities = shiftsim_core::world::Elasticities::variable();
            cfg.synthetic = Some(spec);
        }
        Command::Decompose { nash: true } => cfg.nash = true,
        _ => {}
    }
    if c.verbose > 0 {
        cfg.verbosity = Some(["info", "debug", "trace"][usize::from(c.verbose.min(3)) - 1].into());
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = build_config(cli)?;
    let level = cfg.verbosity.as_deref().unwrap_or("warn");
    env_logger::Builder::new().parse_filters(level).format_timestamp(None).init();
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Calibrate => cmd_calibrate(&cfg),
        Command::Simulate => cmd_simulate(&cfg),
        Command::Synth { .. } => cmd_synth(&cfg),
        Command::Estimate => cmd_estimate(&cfg),
        Command::Decompose { .. } => cmd_decompose(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
