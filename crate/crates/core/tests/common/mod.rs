#![allow(dead_code)]

use clfcbf::cbf_core::{h_pair, h_pair_gradient, AgentState, ControllerParams, Dynamics, TaskClf};
use clfcbf::deadlock_geom::{aux_cbf, collinearity};
use clfcbf::linalg_so::{exp_so, omega_dim, rotation2, Matrix, Vector};
use clfcbf::qp::QpProblem;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `f_k = 0.3 sin(x_{k+1}) - 0.1 x_k`, `g_kc = δ_kc + 0.1 sin(x_c + 2 x_k)`.
#[derive(Debug, Clone, Copy)]
pub struct WobblyPlant {
    pub dim: usize,
}

impl Dynamics<f64> for WobblyPlant {
    fn dim(&self) -> usize {
        self.dim
    }

    fn input_dim(&self) -> usize {
        self.dim
    }

    fn drift(&self, x: &Vector<f64>) -> Vector<f64> {
        let d = self.dim;
        Vector::from_vec((0..d).map(|k| 0.3 * x[(k + 1) % d].sin() - 0.1 * x[k]).collect())
    }

    fn input_matrix(&self, x: &Vector<f64>) -> Matrix<f64> {
        let d = self.dim;
        let rows: Vec<Vec<f64>> = (0..d)
            .map(|k| (0..d).map(|c| if k == c { 1.0 } else { 0.0 } + 0.1 * (x[c] + 2.0 * x[k]).sin()).collect())
            .collect();
        Matrix::from_rows(&rows)
    }

    fn drift_jacobian(&self, x: &Vector<f64>) -> Matrix<f64> {
        let d = self.dim;
        let mut j = Matrix::zeros(d, d);
        for k in 0..d {
            j[(k, (k + 1) % d)] += 0.3 * x[(k + 1) % d].cos();
            j[(k, k)] -= 0.1;
        }
        j
    }

    fn input_column_jacobians(&self, x: &Vector<f64>) -> Vec<Matrix<f64>> {
        let d = self.dim;
        (0..d)
            .map(|c| {
                let mut j = Matrix::zeros(d, d);
                for k in 0..d {
                    let s = 0.1 * (x[c] + 2.0 * x[k]).cos();
                    j[(k, c)] += s;
                    j[(k, k)] += 2.0 * s;
                }
                j
            })
            .collect()
    }
}

/// `V = eᵀWe + κ|e|⁴` with `e = y - goal` and diagonal `W`.
#[derive(Debug, Clone)]
pub struct QuarticClf {
    pub weights: Vec<f64>,
    pub kappa: f64,
}

impl TaskClf<f64> for QuarticClf {
    fn value(&self, y: &Vector<f64>, goal: &Vector<f64>) -> f64 {
        let e = y - goal;
        let quad: f64 = e.iter().zip(&self.weights).map(|(e, w)| w * e * e).sum();
        quad + self.kappa * e.norm_squared().powi(2)
    }

    fn gradient(&self, y: &Vector<f64>, goal: &Vector<f64>) -> Vector<f64> {
        let e = y - goal;
        let n2 = e.norm_squared();
        Vector::from_vec(e.iter().zip(&self.weights).map(|(e, w)| 2.0 * w * e + 4.0 * self.kappa * n2 * e).collect())
    }

    fn hessian(&self, y: &Vector<f64>, goal: &Vector<f64>) -> Matrix<f64> {
        let e = y - goal;
        let d = e.len();
        let mut h = e.outer(&e).scale(8.0 * self.kappa);
        for k in 0..d {
            h[(k, k)] += 2.0 * self.weights[k] + 4.0 * self.kappa * e.norm_squared();
        }
        h
    }
}

pub fn random_vector(rng: &mut ChaCha8Rng, d: usize, span: f64) -> Vector<f64> {
    Vector::from_vec((0..d).map(|_| rng.gen_range(-span..span)).collect())
}

pub fn random_rotation(rng: &mut ChaCha8Rng, d: usize) -> Matrix<f64> {
    if d == 2 {
        return rotation2(rng.gen_range(-3.1..3.1));
    }
    let axis = random_vector(rng, omega_dim(d), 1.0);
    exp_so(d, &axis, rng.gen_range(0.0..3.0)).unwrap()
}

/// Params with `omega_c` sized for dimension `d`.
pub fn params_for(d: usize) -> ControllerParams<f64> {
    ControllerParams { omega_c: vec![0.05; omega_dim(d)], ..ControllerParams::default() }
}

/// `n` non-overlapping agents with random goals, rotations and previous inputs.
pub fn random_snapshot(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<AgentState<f64>> {
    loop {
        let agents: Vec<AgentState<f64>> = (0..n)
            .map(|_| {
                let mut goal = random_vector(rng, d, 10.0);
                if goal.norm() < 0.5 {
                    goal[0] += 1.0;
                }
                let mut a = AgentState::new(random_vector(rng, d, 6.0), goal, rng.gen_range(0.3..1.0));
                a.rotation = random_rotation(rng, d);
                a.last_u = random_vector(rng, d, 2.0);
                a
            })
            .collect();
        let ok = (0..n).all(|i| (i + 1..n).all(|j| h_pair(&agents[i], &agents[j]) > 0.05));
        if ok {
            return agents;
        }
    }
}

// Finite-difference gradient checks.

pub const STEP: f64 = 1e-6;
pub const REL_TOL: f64 = 1e-5;
pub const STATES: usize = 1000;

pub fn fd_position(a: &AgentState<f64>, f: impl Fn(&AgentState<f64>) -> f64) -> Vector<f64> {
    let d = a.dim();
    Vector::from_vec(
        (0..d)
            .map(|k| {
                let (mut plus, mut minus) = (a.clone(), a.clone());
                plus.position[k] += STEP;
                minus.position[k] -= STEP;
                (f(&plus) - f(&minus)) / (2.0 * STEP)
            })
            .collect(),
    )
}

/// Derivative along `Q ← Q exp(θ ê_k)` for each generator `k`.
pub fn fd_rotation(a: &AgentState<f64>, f: impl Fn(&AgentState<f64>) -> f64) -> Vector<f64> {
    let d = a.dim();
    let k_dim = omega_dim(d);
    Vector::from_vec(
        (0..k_dim)
            .map(|k| {
                let e = Vector::basis(k_dim, k);
                let (mut plus, mut minus) = (a.clone(), a.clone());
                plus.rotation = a.rotation.matmul(&exp_so(d, &e, STEP).unwrap());
                minus.rotation = a.rotation.matmul(&exp_so(d, &e, -STEP).unwrap());
                (f(&plus) - f(&minus)) / (2.0 * STEP)
            })
            .collect(),
    )
}

pub fn fd_matrix(x: &Vector<f64>, f: impl Fn(&Vector<f64>) -> Vector<f64>) -> Matrix<f64> {
    let cols: Vec<Vector<f64>> = (0..x.len())
        .map(|k| {
            let (mut plus, mut minus) = (x.clone(), x.clone());
            plus[k] += STEP;
            minus[k] -= STEP;
            (&f(&plus) - &f(&minus)).scale(0.5 / STEP)
        })
        .collect();
    Matrix::from_columns(&cols)
}

pub fn rel_err(analytic: &Vector<f64>, fd: &Vector<f64>) -> f64 {
    let scale = analytic.norm().max(fd.norm()).max(1e-6);
    (analytic - fd).norm() / scale
}

pub fn rel_err_mat(analytic: &Matrix<f64>, fd: &Matrix<f64>) -> f64 {
    let scale = analytic.frobenius_norm().max(fd.frobenius_norm()).max(1e-6);
    analytic.sub(fd).frobenius_norm() / scale
}

#[derive(Default)]
pub struct Worst {
    pub entries: Vec<(&'static str, f64)>,
}

impl Worst {
    pub fn record(&mut self, name: &'static str, err: f64) {
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(e) => e.1 = e.1.max(err),
            None => self.entries.push((name, err)),
        }
    }

    pub fn max(&self) -> f64 {
        self.entries.iter().map(|e| e.1).fold(0.0, f64::max)
    }

    pub fn check(&self) {
        for (name, err) in &self.entries {
            println!("{name:>12}: worst relative error {err:.3e}");
        }
        for (name, err) in &self.entries {
            assert!(*err <= REL_TOL, "{name}: {err:e} > {REL_TOL:e}");
        }
    }
}

pub fn random_pair(rng: &mut ChaCha8Rng, d: usize) -> (AgentState<f64>, AgentState<f64>) {
    loop {
        let mut ai = AgentState::new(random_vector(rng, d, 4.0), random_vector(rng, d, 4.0), rng.gen_range(0.2..1.0));
        ai.rotation = random_rotation(rng, d);
        let aj = AgentState::new(random_vector(rng, d, 4.0), random_vector(rng, d, 4.0), rng.gen_range(0.2..1.0));
        // ψ is clamped at h = 0, so stay clear of the kink.
        if h_pair(&ai, &aj) > 0.05 {
            return (ai, aj);
        }
    }
}

pub fn random_params(rng: &mut ChaCha8Rng, d: usize) -> ControllerParams<f64> {
    let mut p = params_for(d);
    p.psi_scale = rng.gen_range(1.0..10.0);
    p.epsilon = rng.gen_range(0.01..1.0);
    p
}

pub fn check_stack(dynamics: &dyn Dynamics<f64>, clf: &dyn TaskClf<f64>, seed: u64) -> Worst {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = Worst::default();
    let d = dynamics.dim();
    for _ in 0..STATES {
        let (ai, aj) = random_pair(&mut rng, d);
        let params = random_params(&mut rng, d);

        worst.record("grad h", rel_err(&h_pair_gradient(&ai, &aj), &fd_position(&ai, |a| h_pair(a, &aj))));
        worst.record("grad V", rel_err(&clf.plain_gradient(&ai), &fd_position(&ai, |a| clf.plain_value(a))));
        let terms = clf.rotated_terms(&ai);
        worst.record("Vq_x coef", rel_err(&terms.grad_x, &fd_position(&ai, |a| clf.rotated_value(a))));
        worst.record("Vq_w coef", rel_err(&terms.grad_omega, &fd_rotation(&ai, |a| clf.rotated_value(a))));
        let fd_hess = fd_matrix(&ai.position, |x| {
            let mut a = ai.clone();
            a.position = x.clone();
            clf.rotated_gradient(&a)
        });
        worst.record("hess Vq", rel_err_mat(&clf.rotated_hessian(&ai), &fd_hess));

        let geo = aux_cbf(&ai, &aj, dynamics, clf, &params);
        let d_of = |a: &AgentState<f64>| collinearity(a, &aj, dynamics, clf);
        let hd_of = |a: &AgentState<f64>| aux_cbf(a, &aj, dynamics, clf, &params).h_d;
        worst.record("grad_x D", rel_err(&geo.grad_x_d, &fd_position(&ai, d_of)));
        worst.record("grad_Q D", rel_err(&geo.grad_q_d, &fd_rotation(&ai, d_of)));
        worst.record("grad_x hD", rel_err(&geo.grad_x_hd, &fd_position(&ai, hd_of)));
        worst.record("grad_Q hD", rel_err(&geo.grad_q_hd, &fd_rotation(&ai, hd_of)));
    }
    worst
}


// Random QP instances.

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f64> {
    let data: Vec<Vec<f64>> = (0..rows).map(|_| (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    if rows == 0 {
        return Matrix::zeros(0, cols);
    }
    Matrix::from_rows(&data)
}

/// Mix of well-conditioned, ill-conditioned, semidefinite, degenerate and
/// infeasible instances.
pub fn random_instance(rng: &mut ChaCha8Rng, case: usize) -> QpProblem<f64> {
    let n = rng.gen_range(1..=6);
    let mut k = rng.gen_range(0..=12);
    let rank = if case.is_multiple_of(10) { rng.gen_range(1..=n) } else { n };
    let m = random_matrix(rng, rank, n);
    let mut h = m.transpose().matmul(&m);
    if rank == n {
        h = h.add(&Matrix::identity(n).scale(rng.gen_range(1e-3..1.0)));
    }
    let h = h.add(&h.transpose()).scale(0.5);
    let f = Vector::from_vec((0..n).map(|_| rng.gen_range(-5.0..5.0)).collect());
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut b: Vec<f64> = Vec::new();
    if rank < n {
        // Semidefinite objective: bound every coordinate so the problem stays bounded.
        for j in 0..n {
            for sign in [1.0, -1.0] {
                let mut r = vec![0.0; n];
                r[j] = sign;
                rows.push(r);
                b.push(5.0);
            }
        }
        k = k.min(12usize.saturating_sub(rows.len()));
    }
    let a = random_matrix(rng, k, n);
    let anchor = Vector::from_vec((0..n).map(|_| rng.gen_range(-2.0..2.0)).collect());
    for i in 0..k {
        let row = a.row(i);
        let slack = match case % 4 {
            0 => 0.0,
            1 => rng.gen_range(0.0..1.0),
            2 => rng.gen_range(-1.0..1.0),
            _ => rng.gen_range(-0.1..2.0),
        };
        b.push(row.dot(&anchor) + slack);
        rows.push(row.into_vec());
        if case.is_multiple_of(7) && i == 0 {
            // Duplicate row: a degenerate vertex.
            rows.push(rows[rows.len() - 1].clone());
            b.push(b[b.len() - 1]);
        }
    }
    rows.truncate(12);
    b.truncate(12);
    let a = if rows.is_empty() { Matrix::zeros(0, n) } else { Matrix::from_rows(&rows) };
    QpProblem::unlabeled(h, f, a, Vector::from_vec(b)).expect("valid instance")
}

