//! Discrete-time multi-agent simulation: scenarios, the snapshot/decide/integrate
//! loop, deadlock detection, metrics and sweeps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cbf_core::{h_pair, AgentState, ControllerParams, ParamError};
use crate::controller::{decide, ControlDecision, ControllerMode, Plant};
use crate::linalg_so::{integrate_rotation, Matrix, Vector};
use crate::qp::{ConstraintLabel, QpStatus};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec<T> {
    pub position: Vec<T>,
    pub goal: Vec<T>,
    pub radius: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObstacleSpec<T> {
    pub position: Vec<T>,
    pub radius: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig<T> {
    pub dim: usize,
    pub agents: Vec<AgentSpec<T>>,
    /// Agents with frozen dynamics.
    pub obstacles: Vec<ObstacleSpec<T>>,
    pub mode: ControllerMode,
    pub params: ControllerParams<T>,
    pub dt: T,
    pub max_steps: usize,
    pub goal_tolerance: T,
    pub v_stall: T,
    pub stall_window: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Field { path: String, message: String },
    #[error("params.{0}")]
    Params(#[from] ParamError),
}

impl ConfigError {
    fn field(path: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError::Field { path: path.into(), message: message.into() }
    }

    /// Field path of the offending entry.
    pub fn path(&self) -> String {
        match self {
            ConfigError::Field { path, .. } => path.clone(),
            ConfigError::Params(e) => match e {
                ParamError::NotPositive { field, .. } | ParamError::OutOfRange { field, .. } => format!("params.{field}"),
                ParamError::OmegaDim { .. } => "params.omega_c".into(),
            },
        }
    }
}

impl<T: Real> ScenarioConfig<T> {
    pub fn num_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let d = self.dim;
        if !(d == 2 || d == 3) {
            return Err(ConfigError::field("dim", format!("must be 2 or 3, got {d}")));
        }
        if self.agents.is_empty() {
            return Err(ConfigError::field("agents", "at least one agent is required"));
        }
        if !(self.dt > T::zero()) {
            return Err(ConfigError::field("dt", "must be positive"));
        }
        if !(self.goal_tolerance > T::zero()) {
            return Err(ConfigError::field("goal_tolerance", "must be positive"));
        }
        if !(self.v_stall > T::zero()) {
            return Err(ConfigError::field("v_stall", "must be positive"));
        }
        if self.stall_window == 0 {
            return Err(ConfigError::field("stall_window", "must be at least one step"));
        }
        self.params.validate(d)?;
        for (k, a) in self.agents.iter().enumerate() {
            let base = format!("agents[{k}]");
            check_point(&a.position, d, &format!("{base}.position"))?;
            check_point(&a.goal, d, &format!("{base}.goal"))?;
            if !(a.radius > T::zero()) {
                return Err(ConfigError::field(format!("{base}.radius"), "must be positive"));
            }
            if self.mode.has_rotation() && a.goal.iter().all(|g| g.abs() <= T::tolerance(1e-9)) {
                return Err(ConfigError::field(
                    format!("{base}.goal"),
                    "goal at the rotation origin makes the rotated CLF radial; move the goal or use baseline mode",
                ));
            }
        }
        for (k, o) in self.obstacles.iter().enumerate() {
            check_point(&o.position, d, &format!("obstacles[{k}].position"))?;
            if !(o.radius > T::zero()) {
                return Err(ConfigError::field(format!("obstacles[{k}].radius"), "must be positive"));
            }
        }
        let world = self.initial_agents();
        for i in 0..world.len() {
            for j in i + 1..world.len() {
                if !(h_pair(&world[i], &world[j]) > T::zero()) {
                    return Err(ConfigError::field(
                        self.entity_path(i),
                        format!("initial overlap with {}", self.entity_path(j)),
                    ));
                }
            }
        }
        Ok(())
    }

    fn entity_path(&self, idx: usize) -> String {
        let n = self.agents.len();
        if idx < n {
            format!("agents[{idx}]")
        } else {
            format!("obstacles[{}]", idx - n)
        }
    }

    /// Moving agents first, then obstacles.
    pub fn initial_agents(&self) -> Vec<AgentState<T>> {
        let mut out: Vec<AgentState<T>> = self
            .agents
            .iter()
            .map(|a| AgentState::new(Vector::from_slice(&a.position), Vector::from_slice(&a.goal), a.radius))
            .collect();
        out.extend(self.obstacles.iter().map(|o| AgentState::obstacle(Vector::from_slice(&o.position), o.radius)));
        out
    }
}

fn check_point<T: Real>(p: &[T], d: usize, path: &str) -> Result<(), ConfigError> {
    if p.len() != d {
        return Err(ConfigError::field(path, format!("expected {d} coordinates, got {}", p.len())));
    }
    if !p.iter().all(|v| v.is_finite()) {
        return Err(ConfigError::field(path, "non-finite coordinate"));
    }
    Ok(())
}

/// Default run settings shared by generated scenarios.
pub fn default_run_settings<T: Real>() -> (T, usize, T, T, usize) {
    (T::lit(0.02), 5000, T::lit(0.1), T::lit(1e-3), 100)
}

fn ring_config<T: Real>(
    positions: Vec<Vec<T>>,
    radius: T,
    params: ControllerParams<T>,
    mode: ControllerMode,
    seed: u64,
) -> ScenarioConfig<T> {
    let (dt, max_steps, goal_tolerance, v_stall, stall_window) = default_run_settings();
    let agents = positions
        .into_iter()
        .map(|p| AgentSpec { goal: p.iter().map(|&v| -v).collect(), position: p, radius })
        .collect();
    ScenarioConfig {
        dim: 2,
        agents,
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

fn ring_point<T: Real>(ring: T, angle: T) -> Vec<T> {
    // Snap coordinates that are zero up to rounding so axis-aligned layouts are exact.
    let snap = |v: T| if v.abs() <= T::lit(1e-12) * ring { T::zero() } else { v };
    vec![snap(ring * angle.cos()), snap(ring * angle.sin())]
}

/// Agent radius used by generated ring scenarios.
pub const RING_AGENT_RADIUS: f64 = 1.0;

/// `n` agents evenly spaced on a circle of radius `ring`, each heading for the
/// antipodal point. Agent `k` starts at angle `π - 2πk/n`.
pub fn make_ring_scenario<T: Real>(
    n: usize,
    ring: T,
    params: ControllerParams<T>,
    mode: ControllerMode,
) -> ScenarioConfig<T> {
    let pi = T::lit(std::f64::consts::PI);
    let positions = (0..n)
        .map(|k| ring_point(ring, pi - T::lit(2.0) * pi * T::from_usize(k).unwrap() / T::from_usize(n).unwrap()))
        .collect();
    ring_config(positions, T::lit(RING_AGENT_RADIUS), params, mode, 0)
}

/// Ring scenario with every angle perturbed uniformly within `±jitter_deg`.
/// Draws are repeated (deterministically, from the same stream) until no two
/// agents overlap.
pub fn make_jittered_ring<T: Real>(
    n: usize,
    ring: T,
    jitter_deg: f64,
    params: ControllerParams<T>,
    mode: ControllerMode,
    seed: u64,
) -> ScenarioConfig<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = make_ring_scenario(n, ring, params.clone(), mode);
    loop {
        let positions: Vec<Vec<T>> = (0..n)
            .map(|k| {
                let angle = std::f64::consts::PI - 2.0 * std::f64::consts::PI * k as f64 / n as f64
                    + rng.gen_range(-jitter_deg..=jitter_deg).to_radians();
                ring_point(ring, T::lit(angle))
            })
            .collect();
        let cfg = ring_config(positions, base.agents[0].radius, params.clone(), mode, seed);
        if cfg.validate().is_ok() {
            return cfg;
        }
    }
}

/// Mutable simulation state.
#[derive(Debug, Clone)]
pub struct World<T: Real> {
    pub agents: Vec<AgentState<T>>,
    pub step: usize,
    warm: Vec<Option<Vec<ConstraintLabel>>>,
    quiet_steps: Vec<usize>,
}

impl<T: Real> World<T> {
    pub fn new(agents: Vec<AgentState<T>>) -> Self {
        let n = agents.len();
        Self { agents, step: 0, warm: vec![None; n], quiet_steps: vec![0; n] }
    }

    pub fn from_config(cfg: &ScenarioConfig<T>) -> Self {
        Self::new(cfg.initial_agents())
    }
}

/// Advances the world by one step: every moving agent decides from the same
/// snapshot, then all agents integrate.
pub fn step<T: Real>(
    world: &mut World<T>,
    mode: ControllerMode,
    plant: &Plant<T>,
    params: &ControllerParams<T>,
    dt: T,
) -> Vec<Option<ControlDecision<T>>> {
    let snapshot = world.agents.clone();
    let decisions: Vec<Option<ControlDecision<T>>> = (0..snapshot.len())
        .map(|i| {
            if snapshot[i].frozen {
                None
            } else {
                Some(decide(i, &snapshot, mode, plant, params, world.warm[i].as_deref()))
            }
        })
        .collect();
    for (i, dec) in decisions.iter().enumerate() {
        let Some(dec) = dec else { continue };
        let agent = &mut world.agents[i];
        let vel = plant.dynamics.velocity(&agent.position, &dec.u);
        agent.position.axpy(dt, &vel);
        if mode.has_rotation() {
            agent.rotation = integrate_rotation(&agent.rotation, &dec.omega, dt).expect("rotation stays orthonormal");
            if dec.deadlock_active() {
                world.quiet_steps[i] = 0;
            } else {
                world.quiet_steps[i] += 1;
                if world.quiet_steps[i] >= params.q_reset_steps {
                    agent.rotation = Matrix::identity(agent.dim());
                }
            }
        }
        agent.last_u = dec.u.clone();
        agent.last_omega = dec.omega.clone();
        world.warm[i] = if dec.fallback_used || dec.qp_status != QpStatus::Optimal {
            None
        } else {
            Some(dec.active_set.clone())
        };
    }
    world.step += 1;
    decisions
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord<T> {
    pub step: usize,
    pub t: T,
    /// Positions at the start of the step (the snapshot decisions used).
    pub positions: Vec<Vector<T>>,
    pub decisions: Vec<Option<ControlDecision<T>>>,
    /// Minimum `h_ij` over all pairs in the snapshot.
    pub min_h: T,
    /// Goal distance of each moving agent.
    pub goal_distances: Vec<T>,
    /// Mean goal distance of the moving agents.
    pub avg_goal_distance: T,
    pub mean_zeta: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary<T> {
    pub mode: ControllerMode,
    pub steps_run: usize,
    pub converged: bool,
    pub steps_to_convergence: Option<usize>,
    pub deadlock: bool,
    pub final_avg_goal_distance: T,
    pub min_h: T,
    /// Minimum `h` between a moving agent and an obstacle.
    pub min_h_obstacle: Option<T>,
    pub fallback_count: usize,
    /// Optimal solves whose KKT residuals exceeded the certification tolerances.
    pub kkt_violations: usize,
    /// Solves that ended neither optimal nor in the fallback.
    pub qp_failures: usize,
    pub path_lengths: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLog<T> {
    pub steps: Vec<StepRecord<T>>,
    pub final_positions: Vec<Vector<T>>,
    pub summary: RunSummary<T>,
}

fn min_pairwise_h<T: Real>(agents: &[AgentState<T>]) -> (T, Option<T>) {
    let mut min_h = T::infinity();
    let mut min_obs: Option<T> = None;
    for i in 0..agents.len() {
        for j in i + 1..agents.len() {
            let h = h_pair(&agents[i], &agents[j]);
            min_h = min_h.min(h);
            if agents[i].frozen != agents[j].frozen {
                min_obs = Some(min_obs.map_or(h, |m| m.min(h)));
            }
        }
    }
    (min_h, min_obs)
}

fn avg_goal_distance<T: Real>(agents: &[AgentState<T>]) -> T {
    let moving: Vec<&AgentState<T>> = agents.iter().filter(|a| !a.frozen).collect();
    let total: T = moving.iter().map(|a| a.goal_distance()).sum();
    total / T::from_usize(moving.len().max(1)).unwrap()
}

fn all_converged<T: Real>(agents: &[AgentState<T>], tol: T) -> bool {
    agents.iter().filter(|a| !a.frozen).all(|a| a.goal_distance() <= tol)
}

/// Stall classifier over a window of step records: every moving agent's input
/// stays below `v_stall` for the last `stall_window` records while some agent
/// is farther than `goal_tolerance` from its goal.
pub fn detect_deadlock<T: Real>(window: &[StepRecord<T>], v_stall: T, stall_window: usize, goal_tolerance: T) -> bool {
    if stall_window == 0 || window.len() < stall_window {
        return false;
    }
    let tail = &window[window.len() - stall_window..];
    let stalled = tail.iter().all(|rec| {
        rec.decisions.iter().flatten().all(|d| d.u.norm() < v_stall)
    });
    let last = tail.last().expect("non-empty window");
    stalled && last.goal_distances.iter().any(|&g| g > goal_tolerance)
}

/// Runs a scenario until every moving agent is within tolerance of its goal or
/// `max_steps` is reached.
pub fn run<T: Real>(cfg: &ScenarioConfig<T>) -> Result<TrajectoryLog<T>, ConfigError> {
    run_with_plant(cfg, &Plant::single_integrator(cfg.dim))
}

pub fn run_with_plant<T: Real>(cfg: &ScenarioConfig<T>, plant: &Plant<T>) -> Result<TrajectoryLog<T>, ConfigError> {
    cfg.validate()?;
    let mut world = World::from_config(cfg);
    let n_total = world.agents.len();
    let mut steps = Vec::new();
    let mut path_lengths = vec![T::zero(); n_total];
    let (mut min_h, mut min_obs) = min_pairwise_h(&world.agents);
    let mut fallback_count = 0;
    let mut kkt_violations = 0;
    let mut qp_failures = 0;
    let mut steps_to_convergence = if all_converged(&world.agents, cfg.goal_tolerance) { Some(0) } else { None };

    while steps_to_convergence.is_none() && world.step < cfg.max_steps {
        let positions: Vec<Vector<T>> = world.agents.iter().map(|a| a.position.clone()).collect();
        let (snap_min_h, _) = min_pairwise_h(&world.agents);
        let avg = avg_goal_distance(&world.agents);
        let goal_distances = world.agents.iter().filter(|a| !a.frozen).map(|a| a.goal_distance()).collect();
        let t = cfg.dt * T::from_usize(world.step).unwrap();
        let step_index = world.step;
        let decisions = step(&mut world, cfg.mode, plant, &cfg.params, cfg.dt);

        let mut zeta_sum = T::zero();
        let mut movers = 0usize;
        for d in decisions.iter().flatten() {
            zeta_sum += d.zeta;
            movers += 1;
            if d.fallback_used {
                fallback_count += 1;
            } else if d.qp_status != QpStatus::Optimal {
                qp_failures += 1;
            }
            if d.kkt.as_ref().is_some_and(|k| !k.within_tolerance()) {
                kkt_violations += 1;
            }
        }
        for (i, a) in world.agents.iter().enumerate() {
            path_lengths[i] += (&a.position - &positions[i]).norm();
        }
        let (h_now, obs_now) = min_pairwise_h(&world.agents);
        min_h = min_h.min(h_now);
        if let Some(o) = obs_now {
            min_obs = Some(min_obs.map_or(o, |m: T| m.min(o)));
        }
        steps.push(StepRecord {
            step: step_index,
            t,
            positions,
            decisions,
            min_h: snap_min_h,
            goal_distances,
            avg_goal_distance: avg,
            mean_zeta: zeta_sum / T::from_usize(movers.max(1)).unwrap(),
        });
        if all_converged(&world.agents, cfg.goal_tolerance) {
            steps_to_convergence = Some(world.step);
        }
    }

    let final_positions: Vec<Vector<T>> = world.agents.iter().map(|a| a.position.clone()).collect();
    let final_avg = avg_goal_distance(&world.agents);
    let converged = steps_to_convergence.is_some();
    let deadlock = !converged && detect_deadlock(&steps, cfg.v_stall, cfg.stall_window, cfg.goal_tolerance);
    let n_moving = cfg.agents.len();
    Ok(TrajectoryLog {
        steps,
        final_positions,
        summary: RunSummary {
            mode: cfg.mode,
            steps_run: world.step,
            converged,
            steps_to_convergence,
            deadlock,
            final_avg_goal_distance: final_avg,
            min_h,
            min_h_obstacle: min_obs,
            fallback_count,
            kkt_violations,
            qp_failures,
            path_lengths: path_lengths[..n_moving].to_vec(),
        },
    })
}

/// Final-step average goal distance statistics for one `(N, mode)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow<T> {
    pub n: usize,
    pub mode: ControllerMode,
    pub mean: T,
    pub min: T,
    pub max: T,
    pub trials: Vec<T>,
}

/// Settings for the jittered-ring sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig<T> {
    pub n_list: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
    pub ring_radius: T,
    pub jitter_deg: f64,
    pub steps: usize,
    pub dt: T,
    pub goal_tolerance: T,
    pub modes: Vec<ControllerMode>,
    pub params: ControllerParams<T>,
}

impl<T: Real> Default for SweepConfig<T> {
    /// Three ring sizes, ten jittered trials each, compared at step 500.
    fn default() -> Self {
        Self {
            n_list: vec![4, 8, 12],
            trials: 10,
            seed: 0,
            ring_radius: T::lit(10.0),
            jitter_deg: 10.0,
            steps: 500,
            dt: T::lit(0.02),
            goal_tolerance: T::lit(0.1),
            modes: vec![ControllerMode::AlwaysOn, ControllerMode::Adaptive],
            params: ControllerParams::default(),
        }
    }
}

/// Per-trial seed: depends only on the sweep seed, `N` and the trial index.
pub fn trial_seed(seed: u64, n: usize, trial: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((n as u64) << 32) ^ trial as u64
}

/// Runs every `(N, mode, trial)` combination (in parallel) and aggregates in
/// `(N, mode)` order.
pub fn sweep<T: Real>(cfg: &SweepConfig<T>) -> Result<Vec<SweepRow<T>>, ConfigError> {
    let jobs: Vec<(usize, ControllerMode, usize)> = cfg
        .n_list
        .iter()
        .flat_map(|&n| cfg.modes.iter().flat_map(move |&m| (0..cfg.trials).map(move |t| (n, m, t))))
        .collect();
    let results: Vec<Result<T, ConfigError>> = jobs
        .par_iter()
        .map(|&(n, mode, trial)| {
            let mut sc = make_jittered_ring(n, cfg.ring_radius, cfg.jitter_deg, cfg.params.clone(), mode, trial_seed(cfg.seed, n, trial));
            sc.max_steps = cfg.steps;
            sc.dt = cfg.dt;
            sc.goal_tolerance = cfg.goal_tolerance;
            run(&sc).map(|log| log.summary.final_avg_goal_distance)
        })
        .collect();
    let mut rows = Vec::new();
    let mut it = results.into_iter();
    for &n in &cfg.n_list {
        for &mode in &cfg.modes {
            let trials: Vec<T> = (0..cfg.trials).map(|_| it.next().expect("job result")).collect::<Result<_, _>>()?;
            let count = T::from_usize(trials.len().max(1)).unwrap();
            let mean = trials.iter().copied().sum::<T>() / count;
            let min = trials.iter().copied().fold(T::infinity(), T::min);
            let max = trials.iter().copied().fold(T::neg_infinity(), T::max);
            rows.push(SweepRow { n, mode, mean, min, max, trials });
        }
    }
    Ok(rows)
}
