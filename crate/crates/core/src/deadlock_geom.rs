//! Collinearity measure `D_ij`, the auxiliary barrier `h_D = ψ(h)(D - ε)` with
//! its analytic gradients, and the boundary-equilibrium diagnostics of the
//! baseline CLF-CBF controller.
//!
//! With `a = ∇_x V_q`, `b = ∇_{x_i} h_ij`, `G = g gᵀ`, `w = G a`, `c = G b`:
//!
//! ```text
//!     D      = ½ wᵀ (P_f + P_c) w
//!     ∇_x D  = J_wᵀ (P_f + P_c) w + J_fᵀ P_w f + J_cᵀ P_w c
//!     ∇_Q D  = (H_a O_d(x) - O_d(a))ᵀ G (P_f + P_c) w
//! ```
//!
//! where `J_w = G H_a + Γ_{g,a}`, `J_c = G H_h + Γ_{g,b}` and `H_a = Qᵀ H_V Q`.
//! `∇_Q` is the derivative along `Q ← Q exp(θ ω̂)`, the direction `ω` drives.

use serde::{Deserialize, Serialize};

use crate::cbf_core::{h_pair, h_pair_gradient, AgentState, ControllerParams, Dynamics, TaskClf};
use crate::linalg_so::{gamma_op, o_d, projection, Matrix, Vector};
use crate::scalar::Real;

/// `ψ(h) = exp(-(h/s)²)` and `ψ'(h)`, with `h` clamped at zero.
pub fn psi_fn<T: Real>(h: T, params: &ControllerParams<T>) -> (T, T) {
    let h = h.max(T::zero());
    let s = params.psi_scale;
    let psi = (-(h / s).powi(2)).exp();
    let psi_prime = -T::lit(2.0) * h / (s * s) * psi;
    (psi, psi_prime)
}

/// Intermediate quantities shared by `D`, its gradients and the degeneracy test.
struct Pieces<T> {
    x: Vector<T>,
    a: Vector<T>,
    b: Vector<T>,
    f: Vector<T>,
    g: Matrix<T>,
    big_g: Matrix<T>,
    w: Vector<T>,
    c: Vector<T>,
    p_sum: Matrix<T>,
}

fn pieces<T: Real>(ai: &AgentState<T>, aj: &AgentState<T>, dynamics: &dyn Dynamics<T>, clf: &dyn TaskClf<T>) -> Pieces<T> {
    let x = ai.position.clone();
    let a = clf.rotated_gradient(ai);
    let b = h_pair_gradient(ai, aj);
    let f = dynamics.drift(&x);
    let g = dynamics.input_matrix(&x);
    let big_g = g.matmul(&g.transpose());
    let w = big_g.matvec(&a);
    let c = big_g.matvec(&b);
    let p_sum = projection(&f).add(&projection(&c));
    Pieces { x, a, b, f, g, big_g, w, c, p_sum }
}

fn d_value<T: Real>(p: &Pieces<T>) -> T {
    T::lit(0.5) * p.w.dot(&p.p_sum.matvec(&p.w))
}

/// `D_ij = ½ ∇V_qᵀ G (P_f + P_{G∇h}) G ∇V_q`.
pub fn collinearity<T: Real>(
    ai: &AgentState<T>,
    aj: &AgentState<T>,
    dynamics: &dyn Dynamics<T>,
    clf: &dyn TaskClf<T>,
) -> T {
    d_value(&pieces(ai, aj, dynamics, clf))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeadlockGeometry<T> {
    /// Collinearity measure `D_ij`.
    pub d: T,
    /// `D` divided by its value for perpendicular vectors of the same lengths,
    /// a scale-free `sin²`-like number in `[0, 1]`; `None` when `G∇V_q` or
    /// both `f` and `G∇h` vanish.
    pub relative_collinearity: Option<T>,
    pub h: T,
    pub h_d: T,
    pub grad_x_d: Vector<T>,
    pub grad_q_d: Vector<T>,
    pub grad_x_hd: Vector<T>,
    pub grad_q_hd: Vector<T>,
    pub psi: T,
    pub psi_prime: T,
}

/// Auxiliary barrier `h_D = ψ(h_ij)(D_ij - ε)` and its gradients in `x_i`
/// and in the rotation of agent `i`.
pub fn aux_cbf<T: Real>(
    ai: &AgentState<T>,
    aj: &AgentState<T>,
    dynamics: &dyn Dynamics<T>,
    clf: &dyn TaskClf<T>,
    params: &ControllerParams<T>,
) -> DeadlockGeometry<T> {
    let p = pieces(ai, aj, dynamics, clf);
    let d = d_value(&p);
    let d_dim = p.x.len();

    let h_a = clf.rotated_hessian(ai);
    let h_b = Matrix::identity(d_dim).scale(T::lit(2.0));
    let g_jac = dynamics.input_column_jacobians(&p.x);
    let j_w = p.big_g.matmul(&h_a).add(&gamma_op(&p.g, &g_jac, &p.a).expect("dimensions"));
    let j_c = p.big_g.matmul(&h_b).add(&gamma_op(&p.g, &g_jac, &p.b).expect("dimensions"));
    let j_f = dynamics.drift_jacobian(&p.x);
    let p_w = projection(&p.w);

    let p_sum_w = p.p_sum.matvec(&p.w);
    let grad_x_d = &(&j_w.tr_matvec(&p_sum_w) + &j_f.tr_matvec(&p_w.matvec(&p.f))) + &j_c.tr_matvec(&p_w.matvec(&p.c));
    let od_x = o_d(&p.x).expect("rotation dimension");
    let od_a = o_d(&p.a).expect("rotation dimension");
    let da_domega = h_a.matmul(&od_x).sub(&od_a);
    let grad_q_d = da_domega.tr_matvec(&p.big_g.matvec(&p_sum_w));

    let h = h_pair(ai, aj);
    let (psi, psi_prime) = psi_fn(h, params);
    let gap = d - params.epsilon;
    let grad_x_hd = &grad_x_d.scale(psi) + &p.b.scale(psi_prime * gap);
    let grad_q_hd = grad_q_d.scale(psi);

    let scale = T::lit(0.5) * p.w.norm_squared() * (p.f.norm_squared() + p.c.norm_squared());
    let relative_collinearity = if scale > T::zero() { Some((d / scale).max(T::zero())) } else { None };

    DeadlockGeometry {
        d,
        relative_collinearity,
        h,
        h_d: psi * gap,
        grad_x_d,
        grad_q_d,
        grad_x_hd,
        grad_q_hd,
        psi,
        psi_prime,
    }
}

/// Boundary-equilibrium analysis of the baseline (unrotated) CLF-CBF QP for
/// one pair.
///
/// The multipliers are reported in the normalisation `λ = Δ⁻¹(…)`; the QP with
/// objective `|u|² + pδ²` carries multipliers `2λ1`, `2λ2` on its CLF and
/// safety rows when both are active.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumDiagnostics<T> {
    pub f_v: T,
    pub f_h: T,
    pub delta: T,
    /// `None` when `Δ` is numerically zero.
    pub lambda1: Option<T>,
    /// `None` when `Δ` is numerically zero or `∇h = 0`.
    pub lambda2: Option<T>,
    pub in_omega_clf_only: bool,
    pub in_omega_clf_cbf: bool,
    /// The state sits within `1e-12` of an `Ω` inequality's boundary.
    pub omega_ambiguous: bool,
    pub near_boundary_equilibrium: bool,
    /// `f = p γ(V) G ∇V` within `v_tol`.
    pub interior_equilibrium: bool,
}

/// Evaluates the equilibrium classifier for agent `i` against neighbour `j`.
/// `weight` is `i`'s responsibility share, matching the safety row the
/// baseline controller actually enforces.
pub fn equilibrium_diagnostics<T: Real>(
    ai: &AgentState<T>,
    aj: &AgentState<T>,
    dynamics: &dyn Dynamics<T>,
    clf: &dyn TaskClf<T>,
    params: &ControllerParams<T>,
    weight: T,
) -> EquilibriumDiagnostics<T> {
    let x = &ai.position;
    let f = dynamics.drift(x);
    let g = dynamics.input_matrix(x);
    let grad_v = clf.plain_gradient(ai);
    let grad_h = h_pair_gradient(ai, aj);
    let v = clf.plain_value(ai);
    let h = h_pair(ai, aj);
    let lgv = g.tr_matvec(&grad_v);
    let lgh = g.tr_matvec(&grad_h);
    let f_v = grad_v.dot(&f) + params.gamma.apply(v);
    let f_h = grad_h.dot(&f) + weight * params.alpha.apply(h);
    let inv_p = T::one() / params.p;
    let cross = lgv.dot(&lgh);
    let a_coef = inv_p + lgv.norm_squared();
    let b_coef = lgh.norm_squared();
    let delta = cross * cross - a_coef * b_coef;

    let grad_h_zero = grad_h.max_abs() == T::zero();
    let singular = delta.abs() <= T::tolerance(1e-12);
    let (lambda1, lambda2) = if grad_h_zero {
        (Some(f_v / a_coef), None)
    } else if singular {
        (None, None)
    } else {
        (Some((f_h * cross - f_v * b_coef) / delta), Some((f_h * a_coef - f_v * cross) / delta))
    };

    let edge = T::tolerance(1e-12);
    let lhs = cross / a_coef * f_v;
    let in_omega_clf_only = lhs < f_h && f_v >= T::zero();
    let omega_ambiguous = (lhs - f_h).abs() <= edge || f_v.abs() <= edge;
    let nonneg = |l: Option<T>| l.is_some_and(|l| l >= T::zero());
    let in_omega_clf_cbf = nonneg(lambda1) && nonneg(lambda2);

    let speed = dynamics.velocity(x, &ai.last_u).norm();
    let near_boundary_equilibrium = in_omega_clf_cbf && h.abs() <= params.h_tol && speed <= params.v_tol;
    let interior_target = g.matmul(&g.transpose()).matvec(&grad_v).scale(params.p * params.gamma.apply(v));
    let interior_equilibrium = (&f - &interior_target).norm() <= params.v_tol;

    EquilibriumDiagnostics {
        f_v,
        f_h,
        delta,
        lambda1,
        lambda2,
        in_omega_clf_only,
        in_omega_clf_cbf,
        omega_ambiguous,
        near_boundary_equilibrium,
        interior_equilibrium,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cbf_core::{GoalDistanceClf, SingleIntegrator};
    use approx::assert_abs_diff_eq;

    const SI: SingleIntegrator = SingleIntegrator { dim: 2 };

    fn v(xs: &[f64]) -> Vector<f64> {
        Vector::from_slice(xs)
    }

    fn params() -> ControllerParams<f64> {
        ControllerParams::default()
    }

    #[test]
    fn psi_examples() {
        let mut p = params();
        p.psi_scale = 1.0;
        assert_eq!(psi_fn(0.0, &p), (1.0, 0.0));
        let (psi, dpsi) = psi_fn(1.0, &p);
        assert_abs_diff_eq!(psi, (-1.0f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(dpsi, -2.0 * (-1.0f64).exp(), epsilon = 1e-15);
        assert!(psi_fn(10.0, &p).0 < 1e-40);
        assert_eq!(psi_fn(-3.0, &p), (1.0, 0.0));
        let mut last = 1.0;
        for k in 1..50 {
            let now = psi_fn(k as f64 * 0.1, &p).0;
            assert!(now < last && now > 0.0);
            last = now;
        }
    }

    #[test]
    fn collinearity_examples() {
        // ∇V_q = (1, 0): x - goal = (0.5, 0). ∇h = (0, 2): x_i - x_j = (0, 1).
        let ai = AgentState::new(v(&[0.5, 0.0]), v(&[0.0, 0.0]), 0.1);
        let aj = AgentState::new(v(&[0.5, -1.0]), v(&[3.0, 3.0]), 0.1);
        assert_abs_diff_eq!(collinearity(&ai, &aj, &SI, &GoalDistanceClf), 2.0, epsilon = 1e-14);
        // Flip ∇h.
        let ak = AgentState::new(v(&[0.5, 1.0]), v(&[3.0, 3.0]), 0.1);
        assert_abs_diff_eq!(collinearity(&ai, &ak, &SI, &GoalDistanceClf), 2.0, epsilon = 1e-14);
        // Parallel gradients.
        let al = AgentState::new(v(&[3.0, 0.0]), v(&[3.0, 3.0]), 0.1);
        assert_eq!(collinearity(&ai, &al, &SI, &GoalDistanceClf), 0.0);
    }

    #[test]
    fn aux_barrier_zero_and_range() {
        let mut p = params();
        let ai = AgentState::new(v(&[0.5, 0.0]), v(&[0.0, 0.0]), 0.1);
        let aj = AgentState::new(v(&[0.5, -1.0]), v(&[3.0, 3.0]), 0.1);
        p.epsilon = 2.0;
        assert_eq!(aux_cbf(&ai, &aj, &SI, &GoalDistanceClf, &p).h_d, 0.0);

        let far_i = AgentState::new(v(&[-10.0, 0.0]), v(&[10.0, 0.5]), 1.0);
        let far_j = AgentState::new(v(&[10.0, 0.0]), v(&[-10.0, 0.0]), 1.0);
        let geo = aux_cbf(&far_i, &far_j, &SI, &GoalDistanceClf, &params());
        assert_eq!(geo.h, 396.0);
        assert!(geo.h_d.abs() < 1e-100 * (geo.d - 0.1).abs().max(1e-300));
    }

    #[test]
    fn boundary_equilibrium_branch_for_coincident_agents() {
        let p = params();
        let a = AgentState::new(v(&[1.0, 2.0]), v(&[4.0, -2.0]), 0.5);
        let diag = equilibrium_diagnostics(&a, &a, &SI, &GoalDistanceClf, &p, 0.5);
        let lgv = 2.0 * 5.0;
        let expected = (p.gamma.apply(25.0)) / (1.0 / p.p + lgv * lgv);
        assert_eq!(diag.lambda1, Some(expected));
        assert_eq!(diag.lambda2, None);
    }

    #[test]
    fn moving_agent_is_not_at_equilibrium() {
        let p = params();
        let mut a = AgentState::new(v(&[-10.0, 0.0]), v(&[10.0, 0.0]), 1.0);
        a.last_u = v(&[9.0, 0.0]);
        let b = AgentState::new(v(&[0.0, 20.0]), v(&[0.0, -20.0]), 1.0);
        let diag = equilibrium_diagnostics(&a, &b, &SI, &GoalDistanceClf, &p, 0.5);
        assert!(!diag.near_boundary_equilibrium);
    }
}
