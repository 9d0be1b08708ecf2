//! Plot-ready tables and JSON documents.
//!
//! Floats are written with `{:?}`, the shortest representation that parses
//! back to the same `f64`.

use std::fs;
use std::path::{Path, PathBuf};

use clfcbf::controller::ControllerMode;
use clfcbf::sim::{RunSummary, ScenarioConfig, SweepRow, TrajectoryLog};
use clfcbf::unicycle::{nid_map, UnicyclePose};
use serde::Serialize;

use crate::CliError;

/// Version tag of the trajectory, compare and sweep table layouts.
pub const TABLE_SCHEMA: &str = "v1";

pub fn num(x: f64) -> String {
    format!("{x:?}")
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Internal(format!("{}: {e}", path.display()))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    text.push('\n');
    write_text(path, &text)
}

fn write_table(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    w.write_record(header).map_err(|e| io_err(path, e))?;
    for row in rows {
        w.write_record(row).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Trajectory columns for a `dim`-dimensional run.
pub fn trajectory_header(dim: usize, unicycle: bool) -> Vec<String> {
    let axes = ["x", "y", "z"];
    let mut h = vec!["t".to_string(), "agent".to_string()];
    h.extend(axes[..dim].iter().map(|a| a.to_string()));
    h.extend(axes[..dim].iter().map(|a| format!("u_{a}")));
    if dim == 2 {
        h.push("omega".into());
    } else {
        h.extend(axes.iter().map(|a| format!("omega_{a}")));
    }
    h.extend(["delta", "zeta", "risk", "min_h", "fallback"].map(String::from));
    if unicycle {
        h.extend(["theta", "v", "w"].map(String::from));
    }
    h
}

/// One row per step per moving agent. With `unicycle_offset`, each agent also
/// drives a virtual unicycle whose offset point starts on the agent, facing
/// its goal, and the mapped `(v, w)` commands are appended.
pub fn trajectory_rows(cfg: &ScenarioConfig<f64>, log: &TrajectoryLog<f64>, unicycle_offset: Option<f64>) -> Vec<Vec<String>> {
    let n = cfg.agents.len();
    let mut poses: Vec<UnicyclePose<f64>> = cfg
        .agents
        .iter()
        .map(|a| {
            let theta = (a.goal[1] - a.position[1]).atan2(a.goal[0] - a.position[0]);
            let l = unicycle_offset.unwrap_or(0.0);
            UnicyclePose::new(a.position[0] - l * theta.cos(), a.position[1] - l * theta.sin(), theta)
        })
        .collect();
    let omega_len = if cfg.dim == 2 { 1 } else { 3 };
    let mut rows = Vec::with_capacity(log.steps.len() * n);
    for rec in &log.steps {
        for (i, pose) in poses.iter_mut().enumerate() {
            let Some(dec) = rec.decisions[i].as_ref() else { continue };
            let mut row = vec![num(rec.t), i.to_string()];
            row.extend(rec.positions[i].iter().map(|&x| num(x)));
            row.extend(dec.u.iter().map(|&x| num(x)));
            row.extend((0..omega_len).map(|k| num(dec.omega.as_slice().get(k).copied().unwrap_or(0.0))));
            row.push(num(dec.delta));
            row.push(num(dec.zeta));
            row.push(num(dec.risk));
            row.push(dec.min_h().map(num).unwrap_or_default());
            row.push(u8::from(dec.fallback_used).to_string());
            if let Some(l) = unicycle_offset {
                let (v, w) = nid_map([dec.u[0], dec.u[1]], pose, l).expect("offset validated");
                row.extend([num(pose.theta()), num(v), num(w)]);
                *pose = pose.integrate(v, w, cfg.dt);
            }
            rows.push(row);
        }
    }
    rows
}

pub fn write_trajectory(
    path: &Path,
    cfg: &ScenarioConfig<f64>,
    log: &TrajectoryLog<f64>,
    unicycle_offset: Option<f64>,
) -> Result<(), CliError> {
    write_table(path, &trajectory_header(cfg.dim, unicycle_offset.is_some()), &trajectory_rows(cfg, log, unicycle_offset))
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub artifact_version: String,
    pub table_schema: String,
    pub command: String,
    pub config_digest: String,
    pub mode: Option<ControllerMode>,
    pub seed: u64,
    pub outputs: Vec<PathBuf>,
    pub wall_clock_s: f64,
    pub summary: serde_json::Value,
}

impl Manifest {
    pub fn new(command: &str, config_digest: String, mode: Option<ControllerMode>, seed: u64) -> Self {
        Self {
            artifact_version: format!("clfcbf-cli {}", env!("CARGO_PKG_VERSION")),
            table_schema: TABLE_SCHEMA.into(),
            command: command.into(),
            config_digest,
            mode,
            seed,
            outputs: Vec::new(),
            wall_clock_s: 0.0,
            summary: serde_json::Value::Null,
        }
    }
}

/// Outcome of the three-way comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub baseline_deadlock: bool,
    pub resolution_modes_converge: bool,
    /// `None` unless both resolution modes converged.
    pub adaptive_faster: Option<bool>,
    pub text: String,
}

pub fn verdict(summaries: &[RunSummary<f64>]) -> Verdict {
    let by_mode = |m: ControllerMode| summaries.iter().find(|s| s.mode == m);
    let baseline_deadlock = by_mode(ControllerMode::Baseline).is_some_and(|s| s.deadlock);
    let always = by_mode(ControllerMode::AlwaysOn).and_then(|s| s.steps_to_convergence);
    let adaptive = by_mode(ControllerMode::Adaptive).and_then(|s| s.steps_to_convergence);
    let resolution_modes_converge = always.is_some() && adaptive.is_some();
    let adaptive_faster = always.zip(adaptive).map(|(a, b)| b < a);
    let mut parts = vec![if baseline_deadlock { "baseline deadlocks".to_string() } else { "baseline does not deadlock".to_string() }];
    match (always, adaptive) {
        (Some(a), Some(b)) => {
            parts.push("both resolution modes converge".into());
            let cmp = if b < a { "<" } else if b == a { "=" } else { ">" };
            parts.push(format!("adaptive {b} {cmp} always_on {a} steps"));
        }
        _ => parts.push(format!(
            "not converged: {}",
            [(ControllerMode::AlwaysOn, always), (ControllerMode::Adaptive, adaptive)]
                .iter()
                .filter(|(_, s)| s.is_none())
                .map(|(m, _)| m.name())
                .collect::<Vec<_>>()
                .join(", ")
        )),
    }
    Verdict { baseline_deadlock, resolution_modes_converge, adaptive_faster, text: parts.join("; ") }
}

/// Joined per-step table: average goal distance for each mode and the mean
/// adaptive `ζ`. Runs that stopped early hold their final values.
pub fn write_compare(path: &Path, runs: &[(ControllerMode, TrajectoryLog<f64>)], dt: f64) -> Result<(), CliError> {
    let mut header = vec!["step".to_string(), "t".to_string()];
    header.extend(runs.iter().map(|(m, _)| format!("{}_avg_goal_distance", m.name())));
    let adaptive = runs.iter().find(|(m, _)| *m == ControllerMode::Adaptive).map(|(_, l)| l);
    if adaptive.is_some() {
        header.push("adaptive_mean_zeta".into());
    }
    let len = runs.iter().map(|(_, l)| l.steps.len() + 1).max().unwrap_or(0);
    let dist = |log: &TrajectoryLog<f64>, k: usize| match log.steps.get(k) {
        Some(rec) => rec.avg_goal_distance,
        None => log.summary.final_avg_goal_distance,
    };
    let rows: Vec<Vec<String>> = (0..len)
        .map(|k| {
            let mut row = vec![k.to_string(), num(dt * k as f64)];
            row.extend(runs.iter().map(|(_, l)| num(dist(l, k))));
            if let Some(log) = adaptive {
                row.push(num(log.steps.get(k).map_or(0.0, |r| r.mean_zeta)));
            }
            row
        })
        .collect();
    write_table(path, &header, &rows)
}

pub fn write_sweep(path: &Path, rows: &[SweepRow<f64>]) -> Result<(), CliError> {
    let header = ["n", "mode", "mean", "min", "max", "trials"].map(String::from);
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![r.n.to_string(), r.mode.name().into(), num(r.mean), num(r.min), num(r.max), r.trials.len().to_string()])
        .collect();
    write_table(path, &header, &body)
}

pub fn write_sweep_trials(path: &Path, rows: &[SweepRow<f64>], seed: u64) -> Result<(), CliError> {
    let header = ["n", "mode", "trial", "seed", "final_avg_goal_distance"].map(String::from);
    let body: Vec<Vec<String>> = rows
        .iter()
        .flat_map(|r| {
            r.trials.iter().enumerate().map(move |(k, &v)| {
                vec![
                    r.n.to_string(),
                    r.mode.name().into(),
                    k.to_string(),
                    clfcbf::sim::trial_seed(seed, r.n, k).to_string(),
                    num(v),
                ]
            })
        })
        .collect();
    write_table(path, &header, &body)
}
