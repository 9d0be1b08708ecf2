//! Per-agent QP assembly and decision making in the three controller modes.
//!
//! Decision variables are `z = (u, ω, δ)`; the baseline mode has no `ω`. The
//! objective is `|u|² + q|ω|² + pδ²` and the rows are
//!
//! ```text
//!   CLF       (1-ζ)(V̇ + γ(V)) + ζ(V̇_q + γ(V_q)) ≤ δ
//!   safety    ḣ_ij + W_i α(h_ij) ≥ 0                    for every j ≠ i
//!   deadlock  ζ(ḣ_D + β(h_D)) ≥ 0                       for every j ≠ i
//! ```
//!
//! with every derivative expanded as `L_f + L_g u` (plus the `ω` terms of the
//! rotated CLF) so each row is linear in `z`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cbf_core::{
    h_pair, h_pair_lie, indicator, responsibility, risk, AgentState, ControllerParams, Dynamics, GoalDistanceClf,
    SingleIntegrator, TaskClf,
};
use crate::deadlock_geom::{aux_cbf, DeadlockGeometry};
use crate::linalg_so::{omega_dim, Matrix, Vector};
use crate::qp::{solve, ConstraintLabel, KktReport, QpProblem, QpStatus};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerMode {
    /// Plain CLF-CBF QP, no rotation variable.
    Baseline,
    /// Deadlock resolution with the indicator pinned at one.
    AlwaysOn,
    /// Deadlock resolution gated by the risk indicator.
    Adaptive,
}

impl ControllerMode {
    pub const ALL: [ControllerMode; 3] = [ControllerMode::Baseline, ControllerMode::AlwaysOn, ControllerMode::Adaptive];

    pub fn name(self) -> &'static str {
        match self {
            ControllerMode::Baseline => "baseline",
            ControllerMode::AlwaysOn => "always_on",
            ControllerMode::Adaptive => "adaptive",
        }
    }

    pub fn has_rotation(self) -> bool {
        self != ControllerMode::Baseline
    }
}

impl std::str::FromStr for ControllerMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(ControllerMode::Baseline),
            "always_on" | "always-on" | "alwayson" => Ok(ControllerMode::AlwaysOn),
            "adaptive" => Ok(ControllerMode::Adaptive),
            other => Err(format!("unknown mode `{other}` (expected baseline, always_on or adaptive)")),
        }
    }
}

/// Plant model and task CLF shared by every agent.
#[derive(Debug, Clone)]
pub struct Plant<T: Real> {
    pub dynamics: Arc<dyn Dynamics<T>>,
    pub clf: Arc<dyn TaskClf<T>>,
}

impl<T: Real> Plant<T> {
    pub fn single_integrator(dim: usize) -> Self {
        Self { dynamics: Arc::new(SingleIntegrator { dim }), clf: Arc::new(GoalDistanceClf) }
    }

    pub fn dim(&self) -> usize {
        self.dynamics.dim()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackReason {
    Infeasible,
    MaxIter,
    /// A kept deadlock row sits on the collinear configuration.
    Collinear,
    /// The QP settled on a boundary equilibrium (CLF and a safety row both
    /// binding, agent at rest) and returned no rotation to leave it.
    Stalled,
}

/// Per-neighbour quantities recorded with each decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSnapshot<T> {
    pub neighbor: usize,
    pub h: T,
    /// Present whenever the mode evaluates the deadlock geometry.
    pub d: Option<T>,
    pub h_d: Option<T>,
    pub deadlock_row: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlDecision<T> {
    pub u: Vector<T>,
    pub omega: Vector<T>,
    pub delta: T,
    pub zeta: T,
    pub risk: T,
    pub qp_status: QpStatus,
    /// Labels of the rows active at the optimum.
    pub active_set: Vec<ConstraintLabel>,
    pub fallback_used: bool,
    pub fallback_reason: Option<FallbackReason>,
    pub pairs: Vec<PairSnapshot<T>>,
    pub kkt: Option<KktReport<T>>,
    pub qp_iterations: usize,
}

impl<T: Real> ControlDecision<T> {
    /// Whether the deadlock machinery touched this step.
    pub fn deadlock_active(&self) -> bool {
        self.fallback_used || self.pairs.iter().any(|p| p.deadlock_row)
    }

    pub fn min_h(&self) -> Option<T> {
        self.pairs.iter().map(|p| p.h).fold(None, |m, h| Some(m.map_or(h, |m: T| m.min(h))))
    }
}

/// An assembled QP with the geometry used to build it.
#[derive(Debug, Clone)]
pub struct AssembledQp<T> {
    pub problem: QpProblem<T>,
    pub input_dim: usize,
    pub omega_dim: usize,
    pub zeta: T,
    pub pairs: Vec<PairSnapshot<T>>,
    pub geometry: Vec<Option<DeadlockGeometry<T>>>,
    /// Some kept deadlock row is at the collinear configuration.
    pub degenerate: bool,
}

impl<T: Real> AssembledQp<T> {
    pub fn num_vars(&self) -> usize {
        self.input_dim + self.omega_dim + 1
    }
}

/// Builds agent `i`'s QP from an immutable snapshot with a given indicator value.
pub fn assemble_qp<T: Real>(
    i: usize,
    agents: &[AgentState<T>],
    mode: ControllerMode,
    plant: &Plant<T>,
    params: &ControllerParams<T>,
    zeta: T,
) -> AssembledQp<T> {
    let dynamics = plant.dynamics.as_ref();
    let clf = plant.clf.as_ref();
    let me = &agents[i];
    let x = &me.position;
    let m = dynamics.input_dim();
    let k = if mode.has_rotation() { omega_dim(me.dim()) } else { 0 };
    let n = m + k + 1;
    let f = dynamics.drift(x);
    let g = dynamics.input_matrix(x);
    let one = T::one();

    let mut a = Matrix::zeros(0, n);
    let mut b: Vec<T> = Vec::new();
    let mut labels = Vec::new();

    // CLF row.
    let grad_v = clf.plain_gradient(me);
    let lgv = g.tr_matvec(&grad_v);
    let f_v = grad_v.dot(&f) + params.gamma.apply(clf.plain_value(me));
    let mut row = vec![T::zero(); n];
    if mode.has_rotation() {
        let terms = clf.rotated_terms(me);
        let lgvq = g.tr_matvec(&terms.grad_x);
        let f_vq = terms.grad_x.dot(&f) + params.gamma.apply(clf.rotated_value(me));
        for c in 0..m {
            row[c] = (one - zeta) * lgv[c] + zeta * lgvq[c];
        }
        for c in 0..k {
            row[m + c] = zeta * terms.grad_omega[c];
        }
        b.push(-(one - zeta) * f_v - zeta * f_vq);
    } else {
        row[..m].copy_from_slice(lgv.as_slice());
        b.push(-f_v);
    }
    row[n - 1] = -one;
    a.push_row(&row);
    labels.push(ConstraintLabel::Clf);

    // Safety rows.
    let mut pairs = Vec::with_capacity(agents.len().saturating_sub(1));
    for (j, aj) in agents.iter().enumerate() {
        if j == i {
            continue;
        }
        let (lfh, lgh) = h_pair_lie(me, aj, dynamics);
        let h = h_pair(me, aj);
        let mut row = vec![T::zero(); n];
        for c in 0..m {
            row[c] = -lgh[c];
        }
        a.push_row(&row);
        b.push(lfh + responsibility(agents, i, j, params) * params.alpha.apply(h));
        labels.push(ConstraintLabel::Safety(j));
        pairs.push(PairSnapshot { neighbor: j, h, d: None, h_d: None, deadlock_row: false });
    }

    // Deadlock rows.
    let mut geometry = vec![None; pairs.len()];
    let mut degenerate = false;
    if mode.has_rotation() {
        for (slot, pair) in pairs.iter_mut().enumerate() {
            let aj = &agents[pair.neighbor];
            let geo = aux_cbf(me, aj, dynamics, clf, params);
            pair.d = Some(geo.d);
            pair.h_d = Some(geo.h_d);
            if zeta * geo.psi >= params.zeta_floor && zeta > T::zero() {
                pair.deadlock_row = true;
                let lg = g.tr_matvec(&geo.grad_x_hd);
                let mut row = vec![T::zero(); n];
                for c in 0..m {
                    row[c] = -zeta * lg[c];
                }
                for c in 0..k {
                    row[m + c] = -zeta * geo.grad_q_hd[c];
                }
                a.push_row(&row);
                b.push(zeta * (geo.grad_x_hd.dot(&f) + params.beta.apply(geo.h_d)));
                labels.push(ConstraintLabel::Deadlock(pair.neighbor));
                if geo.relative_collinearity.is_some_and(|r| r <= params.collinear_tol) {
                    degenerate = true;
                }
            }
            geometry[slot] = Some(geo);
        }
    }

    let mut diag = vec![T::lit(2.0); n];
    for c in 0..k {
        diag[m + c] = T::lit(2.0) * params.q;
    }
    diag[n - 1] = T::lit(2.0) * params.p;
    let problem = QpProblem::new(Matrix::diagonal(&diag), Vector::zeros(n), a, Vector::from_vec(b), labels)
        .expect("assembled QP is well formed");
    AssembledQp { problem, input_dim: m, omega_dim: k, zeta, pairs, geometry, degenerate }
}

/// Indicator value the mode uses for agent `i`, and the risk behind it.
pub fn mode_indicator<T: Real>(
    i: usize,
    agents: &[AgentState<T>],
    mode: ControllerMode,
    plant: &Plant<T>,
    params: &ControllerParams<T>,
) -> (T, T) {
    let r = risk(i, agents, plant.dynamics.as_ref(), params);
    let zeta = match mode {
        ControllerMode::Baseline => T::zero(),
        ControllerMode::AlwaysOn => T::one(),
        ControllerMode::Adaptive => indicator(r, params),
    };
    (zeta, r)
}

/// Solves agent `i`'s QP. `warm_start` holds the labels active on this agent's
/// previous step; it only affects where the solver starts.
pub fn decide<T: Real>(
    i: usize,
    agents: &[AgentState<T>],
    mode: ControllerMode,
    plant: &Plant<T>,
    params: &ControllerParams<T>,
    warm_start: Option<&[ConstraintLabel]>,
) -> ControlDecision<T> {
    let (zeta, r) = mode_indicator(i, agents, mode, plant, params);
    decide_with_zeta(i, agents, mode, plant, params, warm_start, zeta, r)
}

/// Boundary equilibrium with no rotational escape: CLF and at least one
/// safety row active, the agent at rest and `|ω|` below the fallback rate.
fn stalled<T: Real>(
    u: &Vector<T>,
    omega: &Vector<T>,
    active: &[usize],
    labels: &[ConstraintLabel],
    params: &ControllerParams<T>,
) -> bool {
    let clf = active.iter().any(|&r| labels[r] == ConstraintLabel::Clf);
    let safety = active.iter().any(|&r| matches!(labels[r], ConstraintLabel::Safety(_)));
    clf && safety && u.norm() < params.v_tol && omega.norm() < params.omega_c().norm()
}

/// [`decide`] with the indicator supplied by the caller.
#[allow(clippy::too_many_arguments)]
pub fn decide_with_zeta<T: Real>(
    i: usize,
    agents: &[AgentState<T>],
    mode: ControllerMode,
    plant: &Plant<T>,
    params: &ControllerParams<T>,
    warm_start: Option<&[ConstraintLabel]>,
    zeta: T,
    risk: T,
) -> ControlDecision<T> {
    let qp = assemble_qp(i, agents, mode, plant, params, zeta);
    let labels = &qp.problem.labels;
    let warm: Option<Vec<usize>> = warm_start.map(|ws| {
        ws.iter().filter_map(|l| labels.iter().position(|x| x == l)).collect()
    });
    let omega_len = omega_dim(agents[i].dim());
    let fallback = |reason: FallbackReason, status: QpStatus, iterations: usize| ControlDecision {
        u: Vector::zeros(qp.input_dim),
        omega: params.omega_c(),
        delta: T::zero(),
        zeta,
        risk,
        qp_status: status,
        active_set: Vec::new(),
        fallback_used: true,
        fallback_reason: Some(reason),
        pairs: qp.pairs.clone(),
        kkt: None,
        qp_iterations: iterations,
    };
    if qp.degenerate {
        return fallback(FallbackReason::Collinear, QpStatus::Infeasible, 0);
    }
    let sol = solve(&qp.problem, warm.as_deref());
    match sol.status {
        QpStatus::Optimal => {}
        QpStatus::Infeasible if mode.has_rotation() => {
            return fallback(FallbackReason::Infeasible, sol.status, sol.iterations)
        }
        QpStatus::MaxIter if mode.has_rotation() => return fallback(FallbackReason::MaxIter, sol.status, sol.iterations),
        // The baseline QP always has a feasible point (u = 0 is safe whenever
        // every h ≥ 0 and δ absorbs the CLF row); if the numerics still fail,
        // stand still.
        _ => {
            return ControlDecision {
                u: Vector::zeros(qp.input_dim),
                omega: Vector::zeros(omega_len),
                delta: T::zero(),
                zeta,
                risk,
                qp_status: sol.status,
                active_set: Vec::new(),
                fallback_used: false,
                fallback_reason: None,
                pairs: qp.pairs.clone(),
                kkt: None,
                qp_iterations: sol.iterations,
            }
        }
    }
    let z = sol.z.as_slice();
    let m = qp.input_dim;
    let u = Vector::from_slice(&z[..m]);
    let omega = if qp.omega_dim > 0 { Vector::from_slice(&z[m..m + qp.omega_dim]) } else { Vector::zeros(omega_len) };
    let kkt = qp.problem.kkt_report(&sol.z, &sol.multipliers);
    if mode.has_rotation() && zeta > params.zeta_floor && stalled(&u, &omega, &sol.active_set, labels, params) {
        let mut d = fallback(FallbackReason::Stalled, QpStatus::Optimal, sol.iterations);
        d.kkt = Some(kkt);
        return d;
    }
    ControlDecision {
        u,
        omega,
        delta: z[qp.num_vars() - 1],
        zeta,
        risk,
        qp_status: QpStatus::Optimal,
        active_set: sol.active_set.iter().map(|&r| labels[r]).collect(),
        fallback_used: false,
        fallback_reason: None,
        pairs: qp.pairs,
        kkt: Some(kkt),
        qp_iterations: sol.iterations,
    }
}
