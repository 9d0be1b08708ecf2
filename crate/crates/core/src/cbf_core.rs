//! Agent model, task CLF, pairwise safety CBF, risk measure and the sigmoid
//! deadlock indicator.

use std::fmt::Debug;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg_so::{o_d, omega_dim, orthonormality_error, Matrix, Vector};
use crate::scalar::Real;

/// Control-affine plant `ẋ = f(x) + g(x)u` together with the Jacobians the
/// deadlock geometry needs.
pub trait Dynamics<T: Real>: Debug + Send + Sync {
    /// State (= workspace) dimension `d`.
    fn dim(&self) -> usize;
    /// Input dimension `m`.
    fn input_dim(&self) -> usize;
    fn drift(&self, x: &Vector<T>) -> Vector<T>;
    /// `g(x)`, a `d × m` matrix.
    fn input_matrix(&self, x: &Vector<T>) -> Matrix<T>;
    /// `∂f/∂x`.
    fn drift_jacobian(&self, x: &Vector<T>) -> Matrix<T>;
    /// `∂g_k/∂x` for every column `g_k` of `g`.
    fn input_column_jacobians(&self, x: &Vector<T>) -> Vec<Matrix<T>>;

    fn velocity(&self, x: &Vector<T>, u: &Vector<T>) -> Vector<T> {
        &self.drift(x) + &self.input_matrix(x).matvec(u)
    }
}

/// `ẋ = u`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SingleIntegrator {
    pub dim: usize,
}

impl<T: Real> Dynamics<T> for SingleIntegrator {
    fn dim(&self) -> usize {
        self.dim
    }

    fn input_dim(&self) -> usize {
        self.dim
    }

    fn drift(&self, _x: &Vector<T>) -> Vector<T> {
        Vector::zeros(self.dim)
    }

    fn input_matrix(&self, _x: &Vector<T>) -> Matrix<T> {
        Matrix::identity(self.dim)
    }

    fn drift_jacobian(&self, _x: &Vector<T>) -> Matrix<T> {
        Matrix::zeros(self.dim, self.dim)
    }

    fn input_column_jacobians(&self, _x: &Vector<T>) -> Vec<Matrix<T>> {
        vec![Matrix::zeros(self.dim, self.dim); self.dim]
    }

    fn velocity(&self, _x: &Vector<T>, u: &Vector<T>) -> Vector<T> {
        u.clone()
    }
}

/// Twice-differentiable task CLF `V(y; goal)`.
///
/// The provided methods evaluate both the plain CLF at `x` and the rotated one
/// `V_q = V(Qx)` together with its chain-rule derivatives.
pub trait TaskClf<T: Real>: Debug + Send + Sync {
    fn value(&self, y: &Vector<T>, goal: &Vector<T>) -> T;
    fn gradient(&self, y: &Vector<T>, goal: &Vector<T>) -> Vector<T>;
    fn hessian(&self, y: &Vector<T>, goal: &Vector<T>) -> Matrix<T>;

    fn plain_value(&self, a: &AgentState<T>) -> T {
        self.value(&a.position, &a.goal)
    }

    fn plain_gradient(&self, a: &AgentState<T>) -> Vector<T> {
        self.gradient(&a.position, &a.goal)
    }

    fn rotated_value(&self, a: &AgentState<T>) -> T {
        self.value(&a.rotation.matvec(&a.position), &a.goal)
    }

    /// `∇_x V_q = Qᵀ∇V(Qx)`.
    fn rotated_gradient(&self, a: &AgentState<T>) -> Vector<T> {
        let y = a.rotation.matvec(&a.position);
        a.rotation.tr_matvec(&self.gradient(&y, &a.goal))
    }

    /// `∇²_x V_q = Qᵀ H_V(Qx) Q`.
    fn rotated_hessian(&self, a: &AgentState<T>) -> Matrix<T> {
        let y = a.rotation.matvec(&a.position);
        let q = &a.rotation;
        q.transpose().matmul(&self.hessian(&y, &a.goal)).matmul(q)
    }

    /// Row coefficients of `V̇_q` on `ẋ` and on `ω`.
    fn rotated_terms(&self, a: &AgentState<T>) -> ClfQTerms<T> {
        let grad_x = self.rotated_gradient(a);
        let grad_omega = o_d(&a.position).expect("rotation dimension").tr_matvec(&grad_x);
        ClfQTerms { grad_x, grad_omega }
    }
}

/// `V(y) = |y - goal|²`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoalDistanceClf;

impl<T: Real> TaskClf<T> for GoalDistanceClf {
    fn value(&self, y: &Vector<T>, goal: &Vector<T>) -> T {
        (y - goal).norm_squared()
    }

    fn gradient(&self, y: &Vector<T>, goal: &Vector<T>) -> Vector<T> {
        (y - goal).scale(T::lit(2.0))
    }

    fn hessian(&self, y: &Vector<T>, _goal: &Vector<T>) -> Matrix<T> {
        Matrix::identity(y.len()).scale(T::lit(2.0))
    }
}

/// `V̇_q = grad_xᵀ ẋ + grad_omegaᵀ ω`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClfQTerms<T> {
    pub grad_x: Vector<T>,
    pub grad_omega: Vector<T>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StateError {
    #[error("radius must be positive, got {0}")]
    NonPositiveRadius(f64),
    #[error("rotation is not orthonormal: |QᵀQ - I|_F = {0:e}")]
    NotOrthonormal(f64),
    #[error("{what} has dimension {got}, expected {expected}")]
    Dimension { what: &'static str, expected: usize, got: usize },
    #[error("non-finite state entry")]
    NonFinite,
}

/// Everything one agent publishes to its neighbours, plus its private
/// virtual rotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState<T> {
    pub position: Vector<T>,
    /// Virtual rotation `Q` applied inside the task CLF.
    pub rotation: Matrix<T>,
    pub goal: Vector<T>,
    pub radius: T,
    /// Input executed on the previous step (zero at start).
    pub last_u: Vector<T>,
    pub last_omega: Vector<T>,
    /// Static obstacle: never moves, never decides.
    pub frozen: bool,
}

impl<T: Real> AgentState<T> {
    pub fn new(position: Vector<T>, goal: Vector<T>, radius: T) -> Self {
        let d = position.len();
        Self {
            rotation: Matrix::identity(d),
            last_u: Vector::zeros(d),
            last_omega: Vector::zeros(omega_dim(d)),
            position,
            goal,
            radius,
            frozen: false,
        }
    }

    pub fn obstacle(position: Vector<T>, radius: T) -> Self {
        let mut a = Self::new(position.clone(), position, radius);
        a.frozen = true;
        a
    }

    pub fn dim(&self) -> usize {
        self.position.len()
    }

    pub fn validate(&self) -> Result<(), StateError> {
        let d = self.dim();
        if !(self.radius > T::zero()) {
            return Err(StateError::NonPositiveRadius(self.radius.to_f64_lossy()));
        }
        for (what, got, expected) in [
            ("goal", self.goal.len(), d),
            ("rotation", self.rotation.rows(), d),
            ("rotation", self.rotation.cols(), d),
            ("last_omega", self.last_omega.len(), omega_dim(d)),
        ] {
            if got != expected {
                return Err(StateError::Dimension { what, expected, got });
            }
        }
        if !(self.position.is_finite() && self.goal.is_finite() && self.last_u.is_finite()) {
            return Err(StateError::NonFinite);
        }
        let err = orthonormality_error(&self.rotation);
        if !(err <= T::tolerance(1e-9)) {
            return Err(StateError::NotOrthonormal(err.to_f64_lossy()));
        }
        Ok(())
    }

    pub fn goal_distance(&self) -> T {
        (&self.position - &self.goal).norm()
    }
}

/// Extended class-K function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassK<T> {
    Linear { gain: T },
}

impl<T: Real> ClassK<T> {
    pub fn linear(gain: T) -> Self {
        ClassK::Linear { gain }
    }

    pub fn apply(&self, s: T) -> T {
        match *self {
            ClassK::Linear { gain } => gain * s,
        }
    }

    pub fn gain(&self) -> T {
        match *self {
            ClassK::Linear { gain } => gain,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParamError {
    #[error("{field} must be positive, got {value}")]
    NotPositive { field: &'static str, value: f64 },
    #[error("{field} must lie in ({lo}, {hi}), got {value}")]
    OutOfRange { field: &'static str, value: f64, lo: f64, hi: f64 },
    #[error("omega_c has length {got}, expected {expected}")]
    OmegaDim { expected: usize, got: usize },
}

/// Every tunable scalar of the controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerParams<T> {
    /// CLF decay rate `γ`.
    pub gamma: ClassK<T>,
    /// Safety CBF decay rate `α`.
    pub alpha: ClassK<T>,
    /// Auxiliary (collinearity) CBF decay rate `β`.
    pub beta: ClassK<T>,
    /// Slack weight.
    pub p: T,
    /// Rotational-input weight.
    pub q: T,
    /// Risk offset `φ`.
    pub phi: T,
    /// Sigmoid centre.
    pub c: T,
    /// Sigmoid steepness.
    pub t: T,
    /// Collinearity margin `ε`.
    pub epsilon: T,
    /// Length scale of `ψ(h) = exp(-(h/psi_scale)²)`.
    pub psi_scale: T,
    /// Rotational input used by the infeasibility fallback.
    pub omega_c: Vec<T>,
    /// Share of each pairwise safety constraint taken by the lower-indexed
    /// agent; the other agent takes the rest. Against a static obstacle the
    /// moving agent always takes all of it.
    pub responsibility: T,
    /// Deadlock rows whose effective multiplier `ζ·ψ(h)` falls below this are
    /// dropped.
    pub zeta_floor: T,
    /// A kept deadlock row whose pair is collinear to within this relative
    /// tolerance is treated as the degenerate case and triggers the fallback.
    pub collinear_tol: T,
    /// Steps without any deadlock activity after which `Q` resets to `I`.
    pub q_reset_steps: usize,
    /// `|h|` threshold of the boundary-equilibrium classifier.
    pub h_tol: T,
    /// Speed threshold of the boundary-equilibrium classifier.
    pub v_tol: T,
}

impl<T: Real> Default for ControllerParams<T> {
    fn default() -> Self {
        Self {
            gamma: ClassK::linear(T::lit(1.0)),
            alpha: ClassK::linear(T::lit(4.0)),
            beta: ClassK::linear(T::lit(5.0)),
            p: T::lit(10.0),
            q: T::lit(300.0),
            phi: T::lit(10.0),
            c: T::lit(0.0),
            t: T::lit(1.0),
            epsilon: T::lit(0.1),
            psi_scale: T::lit(2.0),
            omega_c: vec![T::lit(0.05)],
            responsibility: T::lit(0.5),
            zeta_floor: T::lit(1e-9),
            collinear_tol: T::lit(1e-6),
            q_reset_steps: 50,
            h_tol: T::lit(0.5),
            v_tol: T::lit(1e-3),
        }
    }
}

impl<T: Real> ControllerParams<T> {
    pub fn validate(&self, d: usize) -> Result<(), ParamError> {
        let positive = [
            ("gamma", self.gamma.gain()),
            ("alpha", self.alpha.gain()),
            ("beta", self.beta.gain()),
            ("p", self.p),
            ("q", self.q),
            ("phi", self.phi),
            ("t", self.t),
            ("epsilon", self.epsilon),
            ("psi_scale", self.psi_scale),
            ("h_tol", self.h_tol),
            ("v_tol", self.v_tol),
        ];
        for (field, value) in positive {
            if !(value > T::zero()) {
                return Err(ParamError::NotPositive { field, value: value.to_f64_lossy() });
            }
        }
        if !(self.responsibility > T::zero() && self.responsibility < T::one()) {
            return Err(ParamError::OutOfRange {
                field: "responsibility",
                value: self.responsibility.to_f64_lossy(),
                lo: 0.0,
                hi: 1.0,
            });
        }
        if !(self.zeta_floor >= T::zero() && self.zeta_floor < T::one()) {
            return Err(ParamError::OutOfRange {
                field: "zeta_floor",
                value: self.zeta_floor.to_f64_lossy(),
                lo: 0.0,
                hi: 1.0,
            });
        }
        if !(self.collinear_tol >= T::zero()) {
            return Err(ParamError::NotPositive { field: "collinear_tol", value: self.collinear_tol.to_f64_lossy() });
        }
        if self.omega_c.len() != omega_dim(d) {
            return Err(ParamError::OmegaDim { expected: omega_dim(d), got: self.omega_c.len() });
        }
        Ok(())
    }

    pub fn omega_c(&self) -> Vector<T> {
        Vector::from_slice(&self.omega_c)
    }
}

/// Responsibility weight `W_i` of agent `i` in its pair with `j`.
pub fn responsibility<T: Real>(agents: &[AgentState<T>], i: usize, j: usize, params: &ControllerParams<T>) -> T {
    match (agents[i].frozen, agents[j].frozen) {
        (false, true) => T::one(),
        (true, false) => T::zero(),
        _ if i < j => params.responsibility,
        _ => T::one() - params.responsibility,
    }
}

/// `V(x) = |x - goal|²`.
pub fn clf_value<T: Real>(a: &AgentState<T>) -> T {
    GoalDistanceClf.plain_value(a)
}

/// `V_q = |Qx - goal|²`.
pub fn clf_q_value<T: Real>(a: &AgentState<T>) -> T {
    GoalDistanceClf.rotated_value(a)
}

/// Coefficients of `V̇_q` on `ẋ` and `ω` for the goal-distance CLF.
pub fn clf_q_derivative_terms<T: Real>(a: &AgentState<T>) -> ClfQTerms<T> {
    GoalDistanceClf.rotated_terms(a)
}

/// `h_ij = |x_i - x_j|² - (r_i + r_j)²`.
pub fn h_pair<T: Real>(ai: &AgentState<T>, aj: &AgentState<T>) -> T {
    let r = ai.radius + aj.radius;
    (&ai.position - &aj.position).norm_squared() - r * r
}

/// `∇_{x_i} h_ij = 2(x_i - x_j)`.
pub fn h_pair_gradient<T: Real>(ai: &AgentState<T>, aj: &AgentState<T>) -> Vector<T> {
    (&ai.position - &aj.position).scale(T::lit(2.0))
}

/// `(L_f h, L_g h)` with respect to agent `i`'s own state.
pub fn h_pair_lie<T: Real>(ai: &AgentState<T>, aj: &AgentState<T>, dynamics: &dyn Dynamics<T>) -> (T, Vector<T>) {
    let grad = h_pair_gradient(ai, aj);
    let lf = grad.dot(&dynamics.drift(&ai.position));
    let lg = dynamics.input_matrix(&ai.position).tr_matvec(&grad);
    (lf, lg)
}

fn executed_velocity<T: Real>(a: &AgentState<T>, dynamics: &dyn Dynamics<T>) -> Vector<T> {
    if a.frozen {
        Vector::zeros(a.dim())
    } else {
        dynamics.velocity(&a.position, &a.last_u)
    }
}

/// Risk `R_i`: mean over neighbours of `-ḣ_ij - α(h_ij)`, offset by `φ`, with
/// `ḣ_ij` evaluated from both agents' previously executed velocities.
/// A lone agent has `R = φ`.
pub fn risk<T: Real>(
    i: usize,
    agents: &[AgentState<T>],
    dynamics: &dyn Dynamics<T>,
    params: &ControllerParams<T>,
) -> T {
    let n = agents.len();
    if n < 2 {
        return params.phi;
    }
    let vi = executed_velocity(&agents[i], dynamics);
    let mut total = T::zero();
    for (j, aj) in agents.iter().enumerate() {
        if j == i {
            continue;
        }
        let vj = executed_velocity(aj, dynamics);
        let h_dot = h_pair_gradient(&agents[i], aj).dot(&(&vi - &vj));
        total += -h_dot - params.alpha.apply(h_pair(&agents[i], aj));
    }
    total / T::from_usize(n - 1).expect("agent count") + params.phi
}

/// `ζ = 1 / (1 + exp(-t(R - c)))`, evaluated without overflow.
pub fn indicator<T: Real>(r: T, params: &ControllerParams<T>) -> T {
    let s = params.t * (r - params.c);
    if s >= T::zero() {
        T::one() / (T::one() + (-s).exp())
    } else {
        let e = s.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg_so::rotation2;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::{FRAC_PI_2, LN_2};

    fn v(xs: &[f64]) -> Vector<f64> {
        Vector::from_slice(xs)
    }

    fn agent(x: &[f64], goal: &[f64]) -> AgentState<f64> {
        AgentState::new(v(x), v(goal), 1.0)
    }

    #[test]
    fn clf_examples() {
        assert_eq!(clf_value(&agent(&[3.0, 4.0], &[3.0, 4.0])), 0.0);
        assert_eq!(clf_value(&agent(&[-10.0, 0.0], &[10.0, 0.0])), 400.0);
        let mut a = agent(&[10.0, 0.0], &[10.0, 0.0]);
        a.rotation = rotation2(FRAC_PI_2);
        assert_abs_diff_eq!(clf_q_value(&a), 200.0, epsilon = 1e-12);
        let mut b = agent(&[1.0, 0.0], &[0.0, 0.0]);
        b.rotation = rotation2(0.7);
        assert_abs_diff_eq!(clf_q_value(&b), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn identity_rotation_reduces_to_plain_clf() {
        let a = agent(&[1.5, -2.0], &[4.0, 0.5]);
        assert_eq!(clf_q_value(&a), clf_value(&a));
        let terms = clf_q_derivative_terms(&a);
        assert_eq!(terms.grad_x, v(&[-5.0, -5.0]));
    }

    #[test]
    fn rotated_critical_point() {
        let mut a = agent(&[0.0, 2.0], &[2.0, 0.0]);
        a.rotation = rotation2(-FRAC_PI_2);
        let terms = clf_q_derivative_terms(&a);
        assert!(terms.grad_x.max_abs() < 1e-15);
        assert!(terms.grad_omega.max_abs() < 1e-15);
    }

    #[test]
    fn pair_barrier_examples() {
        let a = agent(&[-10.0, 0.0], &[0.0, 0.0]);
        let b = agent(&[10.0, 0.0], &[0.0, 0.0]);
        assert_eq!(h_pair(&a, &b), 396.0);
        let c = agent(&[-8.0, 0.0], &[0.0, 0.0]);
        assert_eq!(h_pair(&a, &c), 0.0);
        let (lf, lg) = h_pair_lie(&a, &b, &SingleIntegrator { dim: 2 });
        assert_eq!(lf, 0.0);
        assert_eq!(lg, v(&[-40.0, 0.0]));
        let (_, lg0) = h_pair_lie(&a, &a, &SingleIntegrator { dim: 2 });
        assert_eq!(lg0, v(&[0.0, 0.0]));
    }

    #[test]
    fn risk_examples() {
        let params = ControllerParams::<f64>::default();
        let dynamics = SingleIntegrator { dim: 2 };
        let k = 3.0;
        let params = ControllerParams { alpha: ClassK::linear(k), ..params };
        // Head-on pair at distance D closing at speed v each.
        let (d, speed, r) = (6.0, 0.5, 1.0);
        let mut a = agent(&[-d / 2.0, 0.0], &[5.0, 0.0]);
        let mut b = agent(&[d / 2.0, 0.0], &[-5.0, 0.0]);
        a.last_u = v(&[speed, 0.0]);
        b.last_u = v(&[-speed, 0.0]);
        let agents = [a, b];
        let expected = 4.0 * d * speed - k * (d * d - 4.0 * r * r) + params.phi;
        assert_abs_diff_eq!(risk(0, &agents, &dynamics, &params), expected, epsilon = 1e-12);
        assert_abs_diff_eq!(risk(1, &agents, &dynamics, &params), expected, epsilon = 1e-12);
        // Parallel translation: relative velocity cancels.
        let mut moving = agents.clone();
        moving[0].last_u = v(&[3.0, 1.0]);
        moving[1].last_u = v(&[3.0, 1.0]);
        let h = h_pair(&moving[0], &moving[1]);
        assert_abs_diff_eq!(risk(0, &moving, &dynamics, &params), -k * h + params.phi, epsilon = 1e-12);
        // Single agent.
        assert_eq!(risk(0, &agents[..1], &dynamics, &params), params.phi);
    }

    #[test]
    fn indicator_examples() {
        let params = ControllerParams::<f64>::default();
        assert_eq!(indicator(0.0, &params), 0.5);
        assert_abs_diff_eq!(indicator(3.0f64.ln(), &params), 0.75, epsilon = 1e-15);
        assert_eq!(indicator(-1e6, &params), 0.0);
        assert_eq!(indicator(1e6, &params), 1.0);
        assert_eq!(indicator(f64::NEG_INFINITY, &params), 0.0);
        assert_abs_diff_eq!(indicator(-LN_2, &params), 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn responsibility_weights_sum_to_one() {
        let params = ControllerParams { responsibility: 0.3, ..ControllerParams::<f64>::default() };
        let agents = vec![agent(&[0.0, 0.0], &[1.0, 0.0]), agent(&[5.0, 0.0], &[1.0, 1.0])];
        let w01 = responsibility(&agents, 0, 1, &params);
        let w10 = responsibility(&agents, 1, 0, &params);
        assert_abs_diff_eq!(w01 + w10, 1.0, epsilon = 1e-15);
        let with_obstacle = vec![agents[0].clone(), AgentState::obstacle(v(&[5.0, 0.0]), 1.0)];
        assert_eq!(responsibility(&with_obstacle, 0, 1, &params), 1.0);
    }

    #[test]
    fn validation() {
        let mut a = agent(&[0.0, 0.0], &[1.0, 0.0]);
        assert!(a.validate().is_ok());
        a.radius = -1.0;
        assert!(matches!(a.validate(), Err(StateError::NonPositiveRadius(_))));
        let params = ControllerParams::<f64>::default();
        assert!(params.validate(2).is_ok());
        assert!(matches!(params.validate(3), Err(ParamError::OmegaDim { .. })));
        let bad = ControllerParams { p: 0.0, ..params };
        assert!(matches!(bad.validate(2), Err(ParamError::NotPositive { field: "p", .. })));
    }
}
