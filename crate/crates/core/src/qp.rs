//! Dense convex QP solver for the per-agent control problems.
//!
//! Problems are stated as
//!
//! ```text
//!     minimize   ½ zᵀ H z + fᵀ z
//!     subject to A z ≤ b
//! ```
//!
//! and solved with a primal active-set method. A feasible starting point comes
//! from the unconstrained minimiser, a warm-started working set, or a phase-1
//! subproblem that also certifies infeasibility. Each constraint row is
//! normalised internally; multipliers and residuals are reported in the
//! caller's units.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg_so::{Matrix, Vector};
use crate::scalar::Real;

/// What a constraint row encodes; neighbour indices refer to the snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConstraintLabel {
    Clf,
    Safety(usize),
    Deadlock(usize),
    Generic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QpError {
    #[error("{what}: expected {expected}, got {got}")]
    Dimension { what: &'static str, expected: usize, got: usize },
    #[error("objective matrix is not symmetric (asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("objective matrix is not positive semidefinite")]
    NotPositiveSemidefinite,
    #[error("non-finite problem data")]
    NonFinite,
}

/// Stationarity tolerance on `|Hz + f + Aᵀλ|_∞`.
pub const STATIONARITY_TOL: f64 = 1e-7;
/// Primal feasibility tolerance on `max(Az - b)`.
pub const FEASIBILITY_TOL: f64 = 1e-8;
/// Complementary slackness tolerance on `max |λ_i (Az - b)_i|`.
pub const COMPLEMENTARITY_TOL: f64 = 1e-7;
/// Lower bound on the smallest multiplier.
pub const MULTIPLIER_TOL: f64 = 1e-9;
/// Relative ridge added to `H` when it is singular or nearly so.
pub const REGULARIZATION: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpProblem<T> {
    pub h: Matrix<T>,
    pub f: Vector<T>,
    pub a: Matrix<T>,
    pub b: Vector<T>,
    pub labels: Vec<ConstraintLabel>,
}

impl<T: Real> QpProblem<T> {
    pub fn new(
        h: Matrix<T>,
        f: Vector<T>,
        a: Matrix<T>,
        b: Vector<T>,
        labels: Vec<ConstraintLabel>,
    ) -> Result<Self, QpError> {
        let n = f.len();
        if h.rows() != n || h.cols() != n {
            return Err(QpError::Dimension { what: "objective matrix", expected: n, got: h.rows() });
        }
        let k = b.len();
        if a.rows() != k {
            return Err(QpError::Dimension { what: "constraint rows", expected: k, got: a.rows() });
        }
        if k > 0 && a.cols() != n {
            return Err(QpError::Dimension { what: "constraint columns", expected: n, got: a.cols() });
        }
        if labels.len() != k {
            return Err(QpError::Dimension { what: "constraint labels", expected: k, got: labels.len() });
        }
        if !(h.is_finite() && f.is_finite() && a.is_finite() && b.is_finite()) {
            return Err(QpError::NonFinite);
        }
        let asym = h.sub(&h.transpose()).max_abs();
        if asym > T::tolerance(1e-12) * (T::one() + h.max_abs()) {
            return Err(QpError::NotSymmetric(asym.to_f64_lossy()));
        }
        let ridge = Matrix::identity(n).scale(T::tolerance(REGULARIZATION) * (T::one() + h.max_abs()));
        if cholesky(&h.add(&ridge), machine_floor()).is_none() {
            return Err(QpError::NotPositiveSemidefinite);
        }
        Ok(Self { h, f, a, b, labels })
    }

    /// Problem with a generic label on every row.
    pub fn unlabeled(h: Matrix<T>, f: Vector<T>, a: Matrix<T>, b: Vector<T>) -> Result<Self, QpError> {
        let k = b.len();
        Self::new(h, f, a, b, vec![ConstraintLabel::Generic; k])
    }

    pub fn num_vars(&self) -> usize {
        self.f.len()
    }

    pub fn num_constraints(&self) -> usize {
        self.b.len()
    }

    pub fn objective(&self, z: &Vector<T>) -> T {
        T::lit(0.5) * z.dot(&self.h.matvec(z)) + self.f.dot(z)
    }

    /// Row-wise `Az - b`.
    pub fn residuals(&self, z: &Vector<T>) -> Vector<T> {
        if self.num_constraints() == 0 {
            return Vector::zeros(0);
        }
        &self.a.matvec(z) - &self.b
    }

    /// Evaluates the KKT triple at `(z, λ)` in the problem's own units.
    pub fn kkt_report(&self, z: &Vector<T>, multipliers: &Vector<T>) -> KktReport<T> {
        let mut grad = &self.h.matvec(z) + &self.f;
        if self.num_constraints() > 0 {
            grad = &grad + &self.a.tr_matvec(multipliers);
        }
        let res = self.residuals(z);
        let primal = res.iter().fold(T::zero(), |m, &r| m.max(r));
        let compl = res
            .iter()
            .zip(multipliers.iter())
            .fold(T::zero(), |m, (&r, &l)| m.max((r * l).abs()));
        let min_mult = multipliers.iter().fold(T::zero(), |m, &l| m.min(l));
        KktReport {
            stationarity: grad.max_abs(),
            primal_infeasibility: primal,
            complementarity: compl,
            min_multiplier: min_mult,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KktReport<T> {
    pub stationarity: T,
    pub primal_infeasibility: T,
    pub complementarity: T,
    pub min_multiplier: T,
}

impl<T: Real> KktReport<T> {
    pub fn within_tolerance(&self) -> bool {
        self.stationarity <= T::tolerance(STATIONARITY_TOL)
            && self.primal_infeasibility <= T::tolerance(FEASIBILITY_TOL)
            && self.complementarity <= T::tolerance(COMPLEMENTARITY_TOL)
            && self.min_multiplier >= -T::tolerance(MULTIPLIER_TOL)
    }

    /// Largest of the three residuals, the scalar stored on a solution.
    pub fn worst(&self) -> T {
        self.stationarity.max(self.primal_infeasibility).max(self.complementarity)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpSolution<T> {
    pub z: Vector<T>,
    pub multipliers: Vector<T>,
    pub active_set: Vec<usize>,
    pub status: QpStatus,
    pub kkt_residual: T,
    pub iterations: usize,
}

impl<T: Real> QpSolution<T> {
    fn failed(p: &QpProblem<T>, status: QpStatus, iterations: usize) -> Self {
        Self {
            z: Vector::zeros(p.num_vars()),
            multipliers: Vector::zeros(p.num_constraints()),
            active_set: Vec::new(),
            status,
            kkt_residual: T::infinity(),
            iterations,
        }
    }

    pub fn is_optimal(&self) -> bool {
        self.status == QpStatus::Optimal
    }
}

/// Cholesky factor, or `None` when a pivot falls to `rel_floor·(1 + max|m|)`.
fn cholesky<T: Real>(m: &Matrix<T>, rel_floor: T) -> Option<Matrix<T>> {
    let n = m.rows();
    let mut l = Matrix::zeros(n, n);
    let floor = rel_floor * (T::one() + m.max_abs());
    for j in 0..n {
        let mut diag = m[(j, j)];
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if diag <= floor {
            return None;
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..n {
            let mut acc = m[(i, j)];
            for k in 0..j {
                acc -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = acc / ljj;
        }
    }
    Some(l)
}

fn machine_floor<T: Real>() -> T {
    T::epsilon() * T::lit(16.0)
}

/// Row-normalised copy of the constraint data used internally by the solver.
struct Scaled<T> {
    a: Matrix<T>,
    b: Vector<T>,
    scale: Vec<T>,
    /// Rows with an all-zero coefficient vector; never enter a working set.
    vacuous: Vec<bool>,
}

enum CoreOutcome<T> {
    Converged { z: Vector<T>, working: Vec<usize>, mu: Vec<T>, iterations: usize },
    Stalled { iterations: usize },
}

/// Solves the equality-constrained subproblem
/// `[H A_Wᵀ; A_W 0][x; μ] = [rhs_top; rhs_bot]`.
fn kkt_solve<T: Real>(
    h: &Matrix<T>,
    a: &Matrix<T>,
    working: &[usize],
    rhs_top: &Vector<T>,
    rhs_bot: &[T],
) -> Option<(Vector<T>, Vec<T>)> {
    let n = h.rows();
    let w = working.len();
    let mut kkt = Matrix::zeros(n + w, n + w);
    for i in 0..n {
        for j in 0..n {
            kkt[(i, j)] = h[(i, j)];
        }
    }
    for (r, &row) in working.iter().enumerate() {
        for j in 0..n {
            let v = a[(row, j)];
            kkt[(n + r, j)] = v;
            kkt[(j, n + r)] = v;
        }
    }
    let mut rhs = Vector::zeros(n + w);
    for i in 0..n {
        rhs[i] = rhs_top[i];
    }
    for (r, &v) in rhs_bot.iter().enumerate() {
        rhs[n + r] = v;
    }
    let mut sol = kkt.solve(&rhs).ok()?;
    // Two rounds of iterative refinement; the KKT matrix can be badly scaled
    // when H carries only the regularisation ridge in some directions.
    for _ in 0..2 {
        let residual = &rhs - &kkt.matvec(&sol);
        let correction = kkt.solve(&residual).ok()?;
        sol = &sol + &correction;
    }
    if !sol.is_finite() {
        return None;
    }
    let x = Vector::from_vec(sol.as_slice()[..n].to_vec());
    let mu = sol.as_slice()[n..].to_vec();
    Some((x, mu))
}

/// Primal active-set iterations from a feasible `z` and working set.
fn active_set_core<T: Real>(
    h: &Matrix<T>,
    f: &Vector<T>,
    sc: &Scaled<T>,
    mut z: Vector<T>,
    mut working: Vec<usize>,
    cap: usize,
) -> CoreOutcome<T> {
    let n = f.len();
    let k = sc.b.len();
    let step_tol = T::tolerance(1e-13);
    let mult_tol = T::tolerance(1e-11);
    let mut zero_steps = 0usize;
    for iter in 0..cap {
        let grad = &h.matvec(&z) + f;
        let Some((p, mu)) = kkt_solve(h, &sc.a, &working, &-&grad, &vec![T::zero(); working.len()])
        else {
            return CoreOutcome::Stalled { iterations: iter };
        };
        let scale = T::one() + z.max_abs();
        if p.max_abs() <= step_tol * scale {
            // Stationary on the working set: check multiplier signs.
            let bland = zero_steps > n + k;
            let mut leave: Option<(usize, T)> = None;
            for (pos, &m) in mu.iter().enumerate() {
                if m < -mult_tol * (T::one() + grad.max_abs()) {
                    let better = match leave {
                        None => true,
                        Some((lp, lm)) => {
                            if bland {
                                working[pos] < working[lp]
                            } else {
                                m < lm || (m == lm && working[pos] < working[lp])
                            }
                        }
                    };
                    if better {
                        leave = Some((pos, m));
                    }
                }
            }
            match leave {
                None => {
                    return CoreOutcome::Converged { z, working, mu, iterations: iter + 1 };
                }
                Some((pos, _)) => {
                    working.remove(pos);
                    zero_steps += 1;
                }
            }
            continue;
        }
        let mut alpha = T::one();
        let mut blocking: Option<usize> = None;
        for i in 0..k {
            if sc.vacuous[i] || working.contains(&i) {
                continue;
            }
            let row = sc.a.row_slice(i);
            let ap: T = row.iter().zip(p.iter()).map(|(&a, &b)| a * b).sum();
            if ap <= step_tol * p.max_abs() {
                continue;
            }
            let az: T = row.iter().zip(z.iter()).map(|(&a, &b)| a * b).sum();
            let t = ((sc.b[i] - az) / ap).max(T::zero());
            if t < alpha {
                alpha = t;
                blocking = Some(i);
            }
        }
        z.axpy(alpha, &p);
        if alpha == T::zero() {
            zero_steps += 1;
        } else {
            zero_steps = 0;
        }
        if let Some(i) = blocking {
            let pos = working.partition_point(|&w| w < i);
            working.insert(pos, i);
        }
    }
    CoreOutcome::Stalled { iterations: cap }
}

fn scale_rows<T: Real>(p: &QpProblem<T>) -> Scaled<T> {
    let k = p.num_constraints();
    let n = p.num_vars();
    let mut a = Matrix::zeros(k, n);
    let mut b = Vector::zeros(k);
    let mut scale = vec![T::one(); k];
    let mut vacuous = vec![false; k];
    for i in 0..k {
        let row = p.a.row(i);
        let norm = row.norm();
        if norm <= T::min_positive_value() {
            vacuous[i] = true;
            b[i] = p.b[i];
            continue;
        }
        scale[i] = norm;
        for j in 0..n {
            a[(i, j)] = row[j] / norm;
        }
        b[i] = p.b[i] / norm;
    }
    Scaled { a, b, scale, vacuous }
}

fn max_violation<T: Real>(sc: &Scaled<T>, z: &Vector<T>) -> T {
    (0..sc.b.len())
        .filter(|&i| !sc.vacuous[i])
        .map(|i| {
            let az: T = sc.a.row_slice(i).iter().zip(z.iter()).map(|(&a, &b)| a * b).sum();
            az - sc.b[i]
        })
        .fold(T::neg_infinity(), T::max)
}

/// Phase-1: `min s + ρ/2(|z - c|² + s²)` s.t. `A z - s ≤ b`, `s ≥ 0`.
///
/// The proximal centre `c` starts at `z0` and is moved to each round's
/// minimiser (a proximal-point iteration on the linear phase-1 problem). A
/// positive `s` whose proximal pull `ρ|z - c|` has vanished is a Farkas
/// certificate of infeasibility.
fn phase_one<T: Real>(sc: &Scaled<T>, z0: &Vector<T>, cap: usize) -> Result<Vector<T>, QpStatus> {
    let n = z0.len();
    let k = sc.b.len();
    let mut rho = T::tolerance(1e-6);
    let mut a1 = Matrix::zeros(k + 1, n + 1);
    let mut b1 = Vector::zeros(k + 1);
    let mut vacuous = vec![false; k + 1];
    for i in 0..k {
        vacuous[i] = sc.vacuous[i];
        for j in 0..n {
            a1[(i, j)] = sc.a[(i, j)];
        }
        a1[(i, n)] = -T::one();
        b1[i] = sc.b[i];
    }
    a1[(k, n)] = -T::one();
    // Rows [a_i, -1] are renormalised so the step test stays scale-free.
    let mut scale = vec![T::one(); k + 1];
    for i in 0..k {
        if vacuous[i] {
            continue;
        }
        let norm = a1.row(i).norm();
        scale[i] = norm;
        for j in 0..=n {
            a1[(i, j)] /= norm;
        }
        b1[i] /= norm;
    }
    let sc1 = Scaled { a: a1, b: b1, scale, vacuous };
    // A huge unconstrained minimiser (semidefinite H) is a poor proximal centre.
    let reach = T::lit(1e3) * (T::one() + sc.b.max_abs());
    let mut centre = if z0.max_abs() <= reach { z0.clone() } else { Vector::zeros(n) };
    let z0 = &centre.clone();
    let mut point = Vector::zeros(n + 1);
    for j in 0..n {
        point[j] = z0[j];
    }
    point[n] = max_violation(sc, z0).max(T::zero()) + T::one();
    let certificate_tol = T::tolerance(1e-12);
    for _round in 0..64 {
        let h1 = Matrix::identity(n + 1).scale(rho);
        let mut f1 = Vector::zeros(n + 1);
        for j in 0..n {
            f1[j] = -rho * centre[j];
        }
        f1[n] = T::one();
        let CoreOutcome::Converged { z, .. } = active_set_core(&h1, &f1, &sc1, point, Vec::new(), cap) else {
            return Err(QpStatus::MaxIter);
        };
        let s = z[n];
        let zs = Vector::from_vec(z.as_slice()[..n].to_vec());
        if s <= T::tolerance(FEASIBILITY_TOL) {
            return Ok(zs);
        }
        let pull = rho * (&zs - &centre).max_abs();
        if pull <= certificate_tol {
            return Err(QpStatus::Infeasible);
        }
        centre = zs;
        point = z;
        rho = (rho * T::lit(0.1)).max(T::tolerance(1e-12));
    }
    Err(QpStatus::Infeasible)
}

fn iteration_cap(k: usize) -> usize {
    (100 * k).max(50)
}

/// Solves `p`, optionally warm-started from a previous active set.
///
/// Deterministic for identical inputs. Vacuous rows (all-zero coefficients with
/// `b ≥ 0`) are ignored; a vacuous row with `b < 0` makes the problem infeasible.
pub fn solve<T: Real>(p: &QpProblem<T>, warm_start: Option<&[usize]>) -> QpSolution<T> {
    let n = p.num_vars();
    let k = p.num_constraints();
    let sc = scale_rows(p);
    for i in 0..k {
        if sc.vacuous[i] && sc.b[i] < -T::tolerance(FEASIBILITY_TOL) {
            return QpSolution::failed(p, QpStatus::Infeasible, 0);
        }
    }

    // Nearly singular H gets the ridge too; otherwise a pivot just above
    // rounding level makes the later KKT solves fail.
    let ridge = T::tolerance(REGULARIZATION);
    let h = if cholesky(&p.h, ridge).is_some() {
        p.h.clone()
    } else {
        p.h.add(&Matrix::identity(n).scale(ridge * (T::one() + p.h.max_abs())))
    };
    let cap = iteration_cap(k);
    let feas_tol = T::tolerance(FEASIBILITY_TOL);

    let Some((z_unc, _)) = kkt_solve(&h, &sc.a, &[], &-&p.f, &[]) else {
        return QpSolution::failed(p, QpStatus::MaxIter, 0);
    };

    let mut start: Option<(Vector<T>, Vec<usize>)> = None;
    if k == 0 || max_violation(&sc, &z_unc) <= feas_tol {
        start = Some((z_unc.clone(), Vec::new()));
    }
    if start.is_none() {
        if let Some(warm) = warm_start {
            let mut ws: Vec<usize> = warm.iter().copied().filter(|&i| i < k && !sc.vacuous[i]).collect();
            ws.sort_unstable();
            ws.dedup();
            if ws.len() <= n {
                let rhs: Vec<T> = ws.iter().map(|&i| sc.b[i]).collect();
                if let Some((zw, _)) = kkt_solve(&h, &sc.a, &ws, &-&p.f, &rhs) {
                    if max_violation(&sc, &zw) <= feas_tol {
                        start = Some((zw, ws));
                    }
                }
            }
        }
    }
    let mut phase_one_iters = 0;
    let (z0, w0) = match start {
        Some(s) => s,
        None => match phase_one(&sc, &z_unc, cap) {
            Ok(z) => {
                phase_one_iters = 1;
                (z, Vec::new())
            }
            Err(status) => return QpSolution::failed(p, status, 0),
        },
    };

    match active_set_core(&h, &p.f, &sc, z0, w0, cap) {
        CoreOutcome::Converged { mut z, working, mut mu, iterations } => {
            // Re-solve the final equality system directly so rounding from the
            // accumulated steps does not leak into the active rows.
            let rhs: Vec<T> = working.iter().map(|&i| sc.b[i]).collect();
            if let Some((zp, mp)) = kkt_solve(&h, &sc.a, &working, &-&p.f, &rhs) {
                let dual_ok = mp.iter().all(|&m| m >= -T::tolerance(1e-9));
                if dual_ok && max_violation(&sc, &zp) <= max_violation(&sc, &z).max(T::zero()) + feas_tol {
                    z = zp;
                    mu = mp;
                }
            }
            let mut multipliers = Vector::zeros(k);
            let mut active_set = Vec::with_capacity(working.len());
            for (&row, &m) in working.iter().zip(&mu) {
                multipliers[row] = m.max(T::zero()) / sc.scale[row];
                active_set.push(row);
            }
            let report = p.kkt_report(&z, &multipliers);
            QpSolution {
                z,
                multipliers,
                active_set,
                status: QpStatus::Optimal,
                kkt_residual: report.worst(),
                iterations: iterations + phase_one_iters,
            }
        }
        CoreOutcome::Stalled { iterations } => QpSolution::failed(p, QpStatus::MaxIter, iterations),
    }
}

pub mod oracle {
    //! Exhaustive active-set enumeration, kept deliberately naive: every subset
    //! of at most `n` rows is tried as an equality system and the feasible,
    //! dual-feasible point of least objective wins. Exponential in `k`; meant
    //! for tests with `k ≤ 12`.

    use super::*;

    /// Gauss–Jordan elimination with full pivoting; `None` when singular.
    fn gauss_jordan<T: Real>(mut m: Vec<Vec<T>>, mut rhs: Vec<T>) -> Option<Vec<T>> {
        let n = rhs.len();
        let scale = m.iter().flatten().fold(T::zero(), |acc, v| acc.max(v.abs()));
        let tiny = (scale + T::one()) * T::epsilon() * T::lit(1e3);
        let mut perm: Vec<usize> = (0..n).collect();
        for col in 0..n {
            let mut best = (col, col, T::zero());
            for r in col..n {
                for c in col..n {
                    if m[r][c].abs() > best.2 {
                        best = (r, c, m[r][c].abs());
                    }
                }
            }
            if best.2 <= tiny {
                return None;
            }
            m.swap(col, best.0);
            rhs.swap(col, best.0);
            if best.1 != col {
                for row in m.iter_mut() {
                    row.swap(col, best.1);
                }
                perm.swap(col, best.1);
            }
            let pivot = m[col][col];
            for c in 0..n {
                m[col][c] /= pivot;
            }
            rhs[col] /= pivot;
            for r in 0..n {
                if r != col {
                    let factor = m[r][col];
                    if factor != T::zero() {
                        for c in 0..n {
                            let v = m[col][c];
                            m[r][c] -= factor * v;
                        }
                        let v = rhs[col];
                        rhs[r] -= factor * v;
                    }
                }
            }
        }
        let mut x = vec![T::zero(); n];
        for (i, &p) in perm.iter().enumerate() {
            x[p] = rhs[i];
        }
        Some(x)
    }

    /// Objective, point, multipliers and active rows of a candidate.
    type Candidate<T> = (T, Vector<T>, Vector<T>, Vec<usize>);

    /// Reference solver: enumerates candidate active sets.
    pub fn oracle_solve<T: Real>(p: &QpProblem<T>) -> QpSolution<T> {
        let n = p.num_vars();
        let k = p.num_constraints();
        assert!(k <= 20, "oracle enumeration is exponential in the row count");
        let mut h = p.h.clone();
        if super::cholesky(&h, super::machine_floor()).is_none() {
            h = h.add(&Matrix::identity(n).scale(T::tolerance(REGULARIZATION)));
        }
        let mut best: Option<Candidate<T>> = None;
        let mut subsets = 0usize;
        for mask in 0u32..(1u32 << k) {
            let rows: Vec<usize> = (0..k).filter(|&i| mask & (1 << i) != 0).collect();
            if rows.len() > n {
                continue;
            }
            subsets += 1;
            let size = n + rows.len();
            let mut m = vec![vec![T::zero(); size]; size];
            let mut rhs = vec![T::zero(); size];
            for i in 0..n {
                for j in 0..n {
                    m[i][j] = h[(i, j)];
                }
                rhs[i] = -p.f[i];
            }
            for (r, &row) in rows.iter().enumerate() {
                for j in 0..n {
                    m[n + r][j] = p.a[(row, j)];
                    m[j][n + r] = p.a[(row, j)];
                }
                rhs[n + r] = p.b[row];
            }
            let Some(sol) = gauss_jordan(m, rhs) else { continue };
            let z = Vector::from_slice(&sol[..n]);
            let mut lambda = Vector::zeros(k);
            let mut dual_ok = true;
            for (r, &row) in rows.iter().enumerate() {
                let l = sol[n + r];
                let tol = T::tolerance(1e-9) * (T::one() + p.a.row(row).norm());
                if l < -tol {
                    dual_ok = false;
                    break;
                }
                lambda[row] = l.max(T::zero());
            }
            if !dual_ok {
                continue;
            }
            let res = p.residuals(&z);
            let primal_ok = (0..k).all(|i| {
                let tol = T::tolerance(1e-9) * (T::one() + p.b[i].abs() + p.a.row(i).norm() * z.max_abs());
                res[i] <= tol
            });
            if !primal_ok {
                continue;
            }
            let obj = p.objective(&z);
            if best.as_ref().is_none_or(|(o, ..)| obj < *o) {
                best = Some((obj, z, lambda, rows));
            }
        }
        match best {
            Some((_, z, multipliers, active_set)) => {
                let report = p.kkt_report(&z, &multipliers);
                QpSolution {
                    z,
                    multipliers,
                    active_set,
                    status: QpStatus::Optimal,
                    kkt_residual: report.worst(),
                    iterations: subsets,
                }
            }
            None => QpSolution::failed(p, QpStatus::Infeasible, subsets),
        }
    }
}

pub use oracle::oracle_solve;

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn m(rows: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
    }

    fn v(xs: &[f64]) -> Vector<f64> {
        Vector::from_slice(xs)
    }

    #[test]
    fn unconstrained_minimum() {
        let p = QpProblem::unlabeled(m(&[&[2.0, 0.0], &[0.0, 2.0]]), v(&[0.0, 0.0]), Matrix::zeros(0, 2), v(&[]))
            .unwrap();
        let s = solve(&p, None);
        assert_eq!(s.status, QpStatus::Optimal);
        assert_eq!(s.z, v(&[0.0, 0.0]));
    }

    #[test]
    fn one_dimensional_bound() {
        // min (z-1)^2 s.t. z <= 0  ->  z = 0, λ = 2
        let p = QpProblem::unlabeled(m(&[&[2.0]]), v(&[-2.0]), m(&[&[1.0]]), v(&[0.0])).unwrap();
        let s = solve(&p, None);
        assert_eq!(s.status, QpStatus::Optimal);
        assert_abs_diff_eq!(s.z[0], 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(s.multipliers[0], 2.0, epsilon = 1e-12);
        assert_eq!(s.active_set, vec![0]);
        assert!(p.kkt_report(&s.z, &s.multipliers).within_tolerance());
    }

    #[test]
    fn contradictory_bounds_are_infeasible() {
        // z <= -1 and -z <= -1
        let p = QpProblem::unlabeled(m(&[&[2.0]]), v(&[0.0]), m(&[&[1.0], &[-1.0]]), v(&[-1.0, -1.0])).unwrap();
        assert_eq!(solve(&p, None).status, QpStatus::Infeasible);
        assert_eq!(oracle_solve(&p).status, QpStatus::Infeasible);
    }

    #[test]
    fn oracle_closed_form_without_rows() {
        let p = QpProblem::unlabeled(m(&[&[4.0, 1.0], &[1.0, 3.0]]), v(&[1.0, -2.0]), Matrix::zeros(0, 2), v(&[]))
            .unwrap();
        let s = oracle_solve(&p);
        let expected = p.h.solve(&-&p.f).unwrap();
        assert_abs_diff_eq!(s.z[0], expected[0], epsilon = 1e-14);
        assert_abs_diff_eq!(s.z[1], expected[1], epsilon = 1e-14);
    }

    #[test]
    fn zero_row_handling() {
        let ok = QpProblem::unlabeled(m(&[&[2.0]]), v(&[-2.0]), m(&[&[0.0]]), v(&[0.0])).unwrap();
        let s = solve(&ok, None);
        assert_eq!(s.status, QpStatus::Optimal);
        assert_abs_diff_eq!(s.z[0], 1.0, epsilon = 1e-14);
        let bad = QpProblem::unlabeled(m(&[&[2.0]]), v(&[-2.0]), m(&[&[0.0]]), v(&[-1.0])).unwrap();
        assert_eq!(solve(&bad, None).status, QpStatus::Infeasible);
    }

    #[test]
    fn semidefinite_objective_is_regularised() {
        // min -z1 s.t. z1 <= 1 with a zero curvature direction.
        let p = QpProblem::unlabeled(m(&[&[0.0, 0.0], &[0.0, 2.0]]), v(&[-1.0, 0.0]), m(&[&[1.0, 0.0]]), v(&[1.0]))
            .unwrap();
        let s = solve(&p, None);
        assert_eq!(s.status, QpStatus::Optimal);
        assert_abs_diff_eq!(s.z[0], 1.0, epsilon = 1e-9);
    }

    #[test]
    fn rejects_bad_problems() {
        assert!(matches!(
            QpProblem::unlabeled(m(&[&[1.0, 2.0], &[0.0, 1.0]]), v(&[0.0, 0.0]), Matrix::zeros(0, 2), v(&[])),
            Err(QpError::NotSymmetric(_))
        ));
        assert!(matches!(
            QpProblem::unlabeled(m(&[&[-1.0]]), v(&[0.0]), Matrix::zeros(0, 1), v(&[])),
            Err(QpError::NotPositiveSemidefinite)
        ));
        assert!(matches!(
            QpProblem::unlabeled(m(&[&[1.0]]), v(&[0.0]), m(&[&[1.0, 1.0]]), v(&[0.0])),
            Err(QpError::Dimension { .. })
        ));
    }

    #[test]
    fn warm_start_reproduces_cold_solution() {
        let p = QpProblem::unlabeled(
            m(&[&[2.0, 0.0], &[0.0, 2.0]]),
            v(&[-4.0, -4.0]),
            m(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]),
            v(&[1.0, 1.5, 2.0]),
        )
        .unwrap();
        let cold = solve(&p, None);
        let warm = solve(&p, Some(&cold.active_set));
        assert_eq!(cold.status, QpStatus::Optimal);
        assert!((cold.z[0] - warm.z[0]).abs() < 1e-12 && (cold.z[1] - warm.z[1]).abs() < 1e-12);
        // A stale warm start must not change the answer.
        let stale = solve(&p, Some(&[2, 7]));
        assert!((cold.z[0] - stale.z[0]).abs() < 1e-12);
    }
}
