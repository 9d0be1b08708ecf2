//! Command implementations behind the `clfcbf` binary.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use clfcbf::controller::ControllerMode;
use clfcbf::sim::{run, sweep, ConfigError, ScenarioConfig, SweepConfig, TrajectoryLog};
use clfcbf::unicycle::DEFAULT_OFFSET;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub mod config;
pub mod export;

use config::Overrides;
use export::Manifest;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {message}")]
    Config { path: String, message: String },
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config { .. } => 2,
            CliError::Internal(_) => 3,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        let message = match &e {
            ConfigError::Field { message, .. } => message.clone(),
            ConfigError::Params(p) => p.to_string(),
        };
        CliError::Config { path: e.path(), message }
    }
}

#[derive(Debug, Parser)]
#[command(name = "clfcbf", version, about = "Multi-agent CLF-CBF scenarios with adaptive deadlock resolution")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate one scenario and export its trajectory.
    Run(RunArgs),
    /// Run baseline, always-on and adaptive on the same scenario.
    Compare(CompareArgs),
    /// Jittered ring sweep comparing always-on and adaptive at a fixed step.
    Sweep(SweepArgs),
    /// Print the default scenario file with every parameter spelled out.
    Defaults,
}

#[derive(Debug, Clone, Args)]
pub struct ScenarioArgs {
    /// Scenario file (TOML).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    /// baseline, always_on or adaptive.
    #[arg(long)]
    pub mode: Option<ControllerMode>,
    /// Append unicycle (theta, v, w) columns to the trajectory.
    #[arg(long)]
    pub unicycle: bool,
    /// Offset-point distance for the unicycle columns, in metres.
    #[arg(long, default_value_t = DEFAULT_OFFSET)]
    pub offset: f64,
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    /// Scenario file supplying params, dt and goal_tolerance; agents are ignored.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [4usize, 8, 12])]
    pub n_list: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Step at which the final average goal distance is read.
    #[arg(long, default_value_t = 500)]
    pub max_steps: usize,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long, default_value_t = 10.0)]
    pub ring_radius: f64,
    #[arg(long, default_value_t = 10.0)]
    pub jitter_deg: f64,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
}

fn resolve_scenario(args: &ScenarioArgs, mode: Option<ControllerMode>) -> Result<ScenarioConfig<f64>, CliError> {
    let file = config::load(&args.config)?;
    let ov = Overrides { mode, seed: args.seed, dt: args.dt, max_steps: args.max_steps };
    config::resolve(&file, &ov)
}

fn prepare_out_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Internal(format!("{}: {e}", dir.display())))
}

fn check_certified(label: &str, log: &TrajectoryLog<f64>) -> Result<(), CliError> {
    let s = &log.summary;
    if s.kkt_violations > 0 || s.qp_failures > 0 {
        return Err(CliError::Internal(format!(
            "{label}: {} KKT violations and {} failed QP solves",
            s.kkt_violations, s.qp_failures
        )));
    }
    Ok(())
}

pub fn cmd_run(args: &RunArgs) -> Result<Manifest, CliError> {
    let started = Instant::now();
    let cfg = resolve_scenario(&args.scenario, args.mode)?;
    let offset = if args.unicycle {
        if cfg.dim != 2 {
            return Err(CliError::Config { path: "--unicycle".into(), message: "unicycle columns need a planar scenario".into() });
        }
        if !(args.offset > 0.0 && args.offset.is_finite()) {
            return Err(CliError::Config { path: "--offset".into(), message: "must be positive".into() });
        }
        Some(args.offset)
    } else {
        None
    };
    let log = run(&cfg)?;
    let dir = &args.scenario.out_dir;
    prepare_out_dir(dir)?;
    let paths = [dir.join("trajectory.csv"), dir.join("summary.json"), dir.join("config.toml"), dir.join("manifest.json")];
    export::write_trajectory(&paths[0], &cfg, &log, offset)?;
    export::write_json(&paths[1], &log.summary)?;
    export::write_text(&paths[2], &config::to_toml(&config::materialize(&cfg)))?;
    let mut manifest = Manifest::new("run", config::digest(&cfg), Some(cfg.mode), cfg.seed);
    manifest.outputs = paths.to_vec();
    manifest.summary = serde_json::to_value(&log.summary).expect("summary serializes");
    manifest.wall_clock_s = started.elapsed().as_secs_f64();
    export::write_json(&paths[3], &manifest)?;
    check_certified(cfg.mode.name(), &log)?;
    Ok(manifest)
}

pub fn cmd_compare(args: &CompareArgs) -> Result<(Manifest, export::Verdict), CliError> {
    let started = Instant::now();
    let base = resolve_scenario(&args.scenario, None)?;
    let mut runs = Vec::new();
    for mode in ControllerMode::ALL {
        let mut cfg = base.clone();
        cfg.mode = mode;
        runs.push((mode, run(&cfg)?));
    }
    let summaries: Vec<_> = runs.iter().map(|(_, l)| l.summary.clone()).collect();
    let verdict = export::verdict(&summaries);
    let dir = &args.scenario.out_dir;
    prepare_out_dir(dir)?;
    let paths = [dir.join("compare.csv"), dir.join("compare.json"), dir.join("config.toml"), dir.join("manifest.json")];
    export::write_compare(&paths[0], &runs, base.dt)?;
    let doc = serde_json::json!({ "summaries": summaries, "verdict": verdict });
    export::write_json(&paths[1], &doc)?;
    export::write_text(&paths[2], &config::to_toml(&config::materialize(&base)))?;
    let mut manifest = Manifest::new("compare", config::digest(&base), None, base.seed);
    manifest.outputs = paths.to_vec();
    manifest.summary = doc;
    manifest.wall_clock_s = started.elapsed().as_secs_f64();
    export::write_json(&paths[3], &manifest)?;
    for (mode, log) in &runs {
        check_certified(mode.name(), log)?;
    }
    Ok((manifest, verdict))
}

pub fn sweep_config(args: &SweepArgs) -> Result<SweepConfig<f64>, CliError> {
    let mut cfg = SweepConfig::<f64>::default();
    if let Some(path) = &args.config {
        let file = config::load(path)?;
        file.params.validate(2).map_err(ConfigError::from)?;
        cfg.params = file.params;
        cfg.dt = file.dt.unwrap_or(cfg.dt);
        cfg.goal_tolerance = file.goal_tolerance.unwrap_or(cfg.goal_tolerance);
    }
    if args.n_list.is_empty() || args.n_list.contains(&0) {
        return Err(CliError::Config { path: "--n-list".into(), message: "needs at least one positive N".into() });
    }
    if args.trials == 0 {
        return Err(CliError::Config { path: "--trials".into(), message: "must be at least one".into() });
    }
    cfg.n_list = args.n_list.clone();
    cfg.trials = args.trials;
    cfg.seed = args.seed;
    cfg.steps = args.max_steps;
    cfg.dt = args.dt.unwrap_or(cfg.dt);
    cfg.ring_radius = args.ring_radius;
    cfg.jitter_deg = args.jitter_deg;
    for &n in &cfg.n_list {
        let ring = config::RingSpec { n, radius: cfg.ring_radius, jitter_deg: cfg.jitter_deg };
        let file = config::FileConfig {
            ring: Some(ring),
            params: cfg.params.clone(),
            dt: Some(cfg.dt),
            ..config::parse(&format!("version = {}", config::FORMAT_VERSION))?
        };
        // Surface ring geometry errors before spending time on trials.
        config::resolve(&file, &Overrides { mode: Some(ControllerMode::Adaptive), ..Default::default() })
            .map_err(|e| match e {
                CliError::Config { path, message } => CliError::Config { path: format!("N = {n}: {path}"), message },
                other => other,
            })?;
    }
    Ok(cfg)
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<(Manifest, Vec<clfcbf::sim::SweepRow<f64>>), CliError> {
    let started = Instant::now();
    let cfg = sweep_config(args)?;
    let rows = sweep(&cfg)?;
    prepare_out_dir(&args.out_dir)?;
    let paths = [args.out_dir.join("sweep.csv"), args.out_dir.join("sweep_trials.csv"), args.out_dir.join("manifest.json")];
    export::write_sweep(&paths[0], &rows)?;
    export::write_sweep_trials(&paths[1], &rows, cfg.seed)?;
    let bytes = serde_json::to_vec(&cfg).expect("sweep config serializes");
    let mut manifest = Manifest::new("sweep", format!("sha256:{:x}", Sha256::digest(&bytes)), None, cfg.seed);
    manifest.outputs = paths.to_vec();
    manifest.summary = serde_json::to_value(&rows).expect("rows serialize");
    manifest.wall_clock_s = started.elapsed().as_secs_f64();
    export::write_json(&paths[2], &manifest)?;
    Ok((manifest, rows))
}

pub fn cmd_defaults() -> String {
    config::to_toml(&config::materialize(&config::default_scenario()))
}
