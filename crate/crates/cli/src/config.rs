//! Scenario files: parsing, override resolution, digests and the materialized
//! default scenario.

use std::path::Path;

use clfcbf::cbf_core::ControllerParams;
use clfcbf::controller::ControllerMode;
use clfcbf::sim::{default_run_settings, make_jittered_ring, make_ring_scenario, AgentSpec, ObstacleSpec, ScenarioConfig, RING_AGENT_RADIUS};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Version of the scenario file format.
pub const FORMAT_VERSION: u32 = 1;

/// Agents evenly spaced on a circle, each heading for the antipodal point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RingSpec {
    pub n: usize,
    pub radius: f64,
    /// Uniform angular jitter in degrees, drawn from `seed`.
    #[serde(default)]
    pub jitter_deg: f64,
}

/// On-disk scenario. Anything left out takes its default, including single
/// entries of `[params]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<ControllerMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal_tolerance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_stall: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stall_window: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Parsed separately (see [`parse`]) so single entries can be overridden.
    #[serde(skip_deserializing, default = "ControllerParams::default")]
    pub params: ControllerParams<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ring: Option<RingSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub agents: Vec<AgentSpec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub obstacles: Vec<ObstacleSpec<f64>>,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub mode: Option<ControllerMode>,
    pub seed: Option<u64>,
    pub dt: Option<f64>,
    pub max_steps: Option<usize>,
}

fn config_err(path: impl Into<String>, message: impl Into<String>) -> CliError {
    CliError::Config { path: path.into(), message: message.into() }
}

fn path_error<E: std::fmt::Display>(prefix: &str, e: serde_path_to_error::Error<E>) -> CliError {
    let path = e.path().to_string();
    let full = e.into_inner().to_string();
    // Errors from toml values append an "in `key`" line; the path already says it.
    let message = full.lines().next().unwrap_or_default().trim().to_string();
    let path = match (prefix, path.as_str()) {
        ("", ".") => "<root>".to_string(),
        (p, ".") => p.to_string(),
        ("", q) => q.to_string(),
        (p, q) => format!("{p}.{q}"),
    };
    config_err(path, message)
}

pub fn parse(text: &str) -> Result<FileConfig, CliError> {
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| config_err("<root>", e.message().trim()))?;
    let given = match table.remove("params") {
        None => toml::Table::new(),
        Some(toml::Value::Table(t)) => t,
        Some(_) => return Err(config_err("params", "expected a table")),
    };
    let mut file: FileConfig = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| path_error("", e))?;
    let mut merged = toml::Table::try_from(ControllerParams::<f64>::default()).expect("defaults serialize");
    merged.extend(given);
    file.params = serde_path_to_error::deserialize(toml::Value::Table(merged)).map_err(|e| path_error("params", e))?;
    if file.version != FORMAT_VERSION {
        return Err(config_err("version", format!("unsupported version {}, expected {FORMAT_VERSION}", file.version)));
    }
    Ok(file)
}

pub fn load(path: &Path) -> Result<FileConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| config_err(path.display().to_string(), e.to_string()))?;
    parse(&text)
}

/// Materializes every default and override into a validated scenario.
pub fn resolve(file: &FileConfig, ov: &Overrides) -> Result<ScenarioConfig<f64>, CliError> {
    let mode = ov.mode.or(file.mode).unwrap_or(ControllerMode::Adaptive);
    let seed = ov.seed.or(file.seed).unwrap_or(0);
    let params = file.params.clone();
    let mut cfg = match (&file.ring, file.agents.is_empty()) {
        (Some(_), false) => return Err(config_err("ring", "give either ring or agents, not both")),
        (None, true) => return Err(config_err("agents", "at least one agent (or a ring) is required")),
        (Some(ring), true) => ring_scenario(ring, file.dim, params, mode, seed)?,
        (None, false) => {
            let (dt, max_steps, goal_tolerance, v_stall, stall_window) = default_run_settings();
            ScenarioConfig {
                dim: file.dim.unwrap_or(2),
                agents: file.agents.clone(),
                obstacles: Vec::new(),
                mode,
                params,
                dt,
                max_steps,
                goal_tolerance,
                v_stall,
                stall_window,
                seed,
            }
        }
    };
    cfg.obstacles = file.obstacles.clone();
    cfg.seed = seed;
    cfg.dt = ov.dt.or(file.dt).unwrap_or(cfg.dt);
    cfg.max_steps = ov.max_steps.or(file.max_steps).unwrap_or(cfg.max_steps);
    cfg.goal_tolerance = file.goal_tolerance.unwrap_or(cfg.goal_tolerance);
    cfg.v_stall = file.v_stall.unwrap_or(cfg.v_stall);
    cfg.stall_window = file.stall_window.unwrap_or(cfg.stall_window);
    cfg.validate()?;
    Ok(cfg)
}

fn ring_scenario(
    ring: &RingSpec,
    dim: Option<usize>,
    params: ControllerParams<f64>,
    mode: ControllerMode,
    seed: u64,
) -> Result<ScenarioConfig<f64>, CliError> {
    if dim.is_some_and(|d| d != 2) {
        return Err(config_err("dim", "ring scenarios are planar"));
    }
    if ring.n == 0 {
        return Err(config_err("ring.n", "must be at least one"));
    }
    if !(ring.radius > 0.0 && ring.radius.is_finite()) {
        return Err(config_err("ring.radius", "must be positive"));
    }
    if !(0.0..90.0).contains(&ring.jitter_deg) {
        return Err(config_err("ring.jitter_deg", "must lie in [0, 90)"));
    }
    // Jittered layouts are redrawn until valid, so only the even layout is checked.
    if ring.n > 1 && 2.0 * ring.radius * (std::f64::consts::PI / ring.n as f64).sin() <= 2.0 * RING_AGENT_RADIUS {
        return Err(config_err("ring.n", "agents on this ring overlap"));
    }
    Ok(if ring.jitter_deg > 0.0 {
        make_jittered_ring(ring.n, ring.radius, ring.jitter_deg, params, mode, seed)
    } else {
        make_ring_scenario(ring.n, ring.radius, params, mode)
    })
}

/// `sha256:` digest of the canonical serialization of a resolved scenario.
pub fn digest(cfg: &ScenarioConfig<f64>) -> String {
    let bytes = serde_json::to_vec(cfg).expect("scenario serializes");
    let hash = Sha256::digest(&bytes);
    format!("sha256:{hash:x}")
}

/// File form of a resolved scenario with every field spelled out.
pub fn materialize(cfg: &ScenarioConfig<f64>) -> FileConfig {
    FileConfig {
        version: FORMAT_VERSION,
        dim: Some(cfg.dim),
        mode: Some(cfg.mode),
        dt: Some(cfg.dt),
        max_steps: Some(cfg.max_steps),
        goal_tolerance: Some(cfg.goal_tolerance),
        v_stall: Some(cfg.v_stall),
        stall_window: Some(cfg.stall_window),
        seed: Some(cfg.seed),
        params: cfg.params.clone(),
        ring: None,
        agents: cfg.agents.clone(),
        obstacles: cfg.obstacles.clone(),
    }
}

pub fn to_toml(file: &FileConfig) -> String {
    toml::to_string(file).expect("scenario file serializes")
}

/// The 4-agent swap on a ring of radius 10 with default settings.
pub fn default_scenario() -> ScenarioConfig<f64> {
    let file = FileConfig {
        version: FORMAT_VERSION,
        dim: None,
        mode: None,
        dt: None,
        max_steps: None,
        goal_tolerance: None,
        v_stall: None,
        stall_window: None,
        seed: None,
        params: ControllerParams::default(),
        ring: Some(RingSpec { n: 4, radius: 10.0, jitter_deg: 0.0 }),
        agents: Vec::new(),
        obstacles: Vec::new(),
    };
    resolve(&file, &Overrides::default()).expect("default scenario is valid")
}
