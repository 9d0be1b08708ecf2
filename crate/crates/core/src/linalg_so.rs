//! Small dense vectors and matrices plus the SO(d) machinery used by the
//! rotated task CLF: hat/vee maps, the `O_d` operator, rotation integration,
//! scaled orthogonal projections and the `Γ` operator.
//!
//! Everything here is sized for d ≤ 3 workspaces and QPs with a handful of
//! variables; storage is heap-backed but no attempt is made at blocking or
//! vectorisation.

use std::ops::{Add, Index, IndexMut, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("rotations are only tabulated for d in {{2, 3}}, got d = {0}")]
    UnsupportedDimension(usize),
    #[error("matrix is not orthonormal: |QᵀQ - I|_F = {0:e}")]
    NotOrthonormal(f64),
    #[error("singular linear system")]
    Singular,
}

/// Dense column vector.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector<T>(Vec<T>);

impl<T: Real> Vector<T> {
    pub fn zeros(n: usize) -> Self {
        Self(vec![T::zero(); n])
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Self(data)
    }

    pub fn from_slice(data: &[T]) -> Self {
        Self(data.to_vec())
    }

    /// Canonical basis vector `e_k` of length `n`.
    pub fn basis(n: usize, k: usize) -> Self {
        let mut v = Self::zeros(n);
        v.0[k] = T::one();
        v
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<T> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.0.iter()
    }

    pub fn dot(&self, other: &Self) -> T {
        debug_assert_eq!(self.len(), other.len());
        self.0.iter().zip(&other.0).map(|(&a, &b)| a * b).sum()
    }

    pub fn norm_squared(&self) -> T {
        self.dot(self)
    }

    pub fn norm(&self) -> T {
        self.norm_squared().sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.0.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn scale(&self, s: T) -> Self {
        Self(self.0.iter().map(|&v| v * s).collect())
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: T, other: &Self) {
        debug_assert_eq!(self.len(), other.len());
        for (a, &b) in self.0.iter_mut().zip(&other.0) {
            *a += s * b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Outer product `self · otherᵀ`.
    pub fn outer(&self, other: &Self) -> Matrix<T> {
        let mut m = Matrix::zeros(self.len(), other.len());
        for i in 0..self.len() {
            for j in 0..other.len() {
                m[(i, j)] = self.0[i] * other.0[j];
            }
        }
        m
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|v| v.to_f64_lossy()).collect()
    }
}

impl<T> Index<usize> for Vector<T> {
    type Output = T;
    fn index(&self, i: usize) -> &T {
        &self.0[i]
    }
}

impl<T> IndexMut<usize> for Vector<T> {
    fn index_mut(&mut self, i: usize) -> &mut T {
        &mut self.0[i]
    }
}

impl<T: Real> Add for &Vector<T> {
    type Output = Vector<T>;
    fn add(self, rhs: &Vector<T>) -> Vector<T> {
        debug_assert_eq!(self.len(), rhs.len());
        Vector(self.0.iter().zip(&rhs.0).map(|(&a, &b)| a + b).collect())
    }
}

impl<T: Real> Sub for &Vector<T> {
    type Output = Vector<T>;
    fn sub(self, rhs: &Vector<T>) -> Vector<T> {
        debug_assert_eq!(self.len(), rhs.len());
        Vector(self.0.iter().zip(&rhs.0).map(|(&a, &b)| a - b).collect())
    }
}

impl<T: Real> Neg for &Vector<T> {
    type Output = Vector<T>;
    fn neg(self) -> Vector<T> {
        Vector(self.0.iter().map(|&a| -a).collect())
    }
}

impl<T: Real> Mul<T> for &Vector<T> {
    type Output = Vector<T>;
    fn mul(self, s: T) -> Vector<T> {
        self.scale(s)
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        Self { rows: r, cols: c, data: rows.concat() }
    }

    /// Builds a matrix whose columns are the given vectors.
    pub fn from_columns(cols: &[Vector<T>]) -> Self {
        let c = cols.len();
        let r = cols.first().map_or(0, Vector::len);
        let mut m = Self::zeros(r, c);
        for (j, col) in cols.iter().enumerate() {
            for i in 0..r {
                m[(i, j)] = col[i];
            }
        }
        m
    }

    pub fn diagonal(diag: &[T]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &v) in diag.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> Vector<T> {
        Vector::from_slice(&self.data[i * self.cols..(i + 1) * self.cols])
    }

    pub fn row_slice(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vector<T> {
        Vector::from_vec((0..self.rows).map(|i| self[(i, j)]).collect())
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, rhs: &Self) -> Self {
        assert_eq!(self.cols, rhs.rows, "matmul dimension mismatch");
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == T::zero() {
                    continue;
                }
                for j in 0..rhs.cols {
                    out[(i, j)] += a * rhs[(k, j)];
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &Vector<T>) -> Vector<T> {
        assert_eq!(self.cols, v.len(), "matvec dimension mismatch");
        Vector::from_vec(
            (0..self.rows)
                .map(|i| self.row_slice(i).iter().zip(v.iter()).map(|(&a, &b)| a * b).sum())
                .collect(),
        )
    }

    /// `selfᵀ · v` without materialising the transpose.
    pub fn tr_matvec(&self, v: &Vector<T>) -> Vector<T> {
        assert_eq!(self.rows, v.len(), "tr_matvec dimension mismatch");
        let mut out = Vector::zeros(self.cols);
        for i in 0..self.rows {
            let vi = v[i];
            for j in 0..self.cols {
                out[j] += self[(i, j)] * vi;
            }
        }
        out
    }

    pub fn scale(&self, s: T) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| v * s).collect() }
    }

    pub fn add(&self, rhs: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| a + b).collect(),
        }
    }

    pub fn sub(&self, rhs: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| a - b).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Appends a row; the matrix must already have `row.len()` columns or be empty.
    pub fn push_row(&mut self, row: &[T]) {
        if self.rows == 0 && self.cols == 0 {
            self.cols = row.len();
        }
        assert_eq!(row.len(), self.cols, "row length mismatch");
        self.data.extend_from_slice(row);
        self.rows += 1;
    }

    /// Solves `self · x = rhs` with partial-pivot Gaussian elimination.
    pub fn solve(&self, rhs: &Vector<T>) -> Result<Vector<T>, LinalgError> {
        let n = self.rows;
        if self.cols != n {
            return Err(LinalgError::DimensionMismatch { expected: n, got: self.cols });
        }
        if rhs.len() != n {
            return Err(LinalgError::DimensionMismatch { expected: n, got: rhs.len() });
        }
        let mut a = self.data.clone();
        let mut x = rhs.clone();
        let scale = self.max_abs().max(T::min_positive_value());
        let tiny = scale * T::epsilon() * T::lit(16.0);
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| a[i * n + col].abs().partial_cmp(&a[j * n + col].abs()).unwrap())
                .unwrap();
            if a[pivot * n + col].abs() <= tiny {
                return Err(LinalgError::Singular);
            }
            if pivot != col {
                for k in 0..n {
                    a.swap(col * n + k, pivot * n + k);
                }
                let tmp = x[col];
                x[col] = x[pivot];
                x[pivot] = tmp;
            }
            let p = a[col * n + col];
            for row in col + 1..n {
                let factor = a[row * n + col] / p;
                if factor == T::zero() {
                    continue;
                }
                for k in col..n {
                    let v = a[col * n + k];
                    a[row * n + k] -= factor * v;
                }
                let v = x[col];
                x[row] -= factor * v;
            }
        }
        for col in (0..n).rev() {
            let mut acc = x[col];
            for k in col + 1..n {
                acc -= a[col * n + k] * x[k];
            }
            x[col] = acc / a[col * n + col];
        }
        Ok(x)
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

/// Number of rotational degrees of freedom, `d(d-1)/2`.
pub const fn omega_dim(d: usize) -> usize {
    d * d.saturating_sub(1) / 2
}

fn check_rotation_dim(d: usize) -> Result<(), LinalgError> {
    match d {
        2 | 3 => Ok(()),
        other => Err(LinalgError::UnsupportedDimension(other)),
    }
}

/// Skew-symmetric matrix `ω̂` for a workspace of dimension `d`.
///
/// d = 2: `[[0, -ω], [ω, 0]]`; d = 3: the cross-product matrix of `ω`.
pub fn hat<T: Real>(d: usize, omega: &Vector<T>) -> Result<Matrix<T>, LinalgError> {
    check_rotation_dim(d)?;
    if omega.len() != omega_dim(d) {
        return Err(LinalgError::DimensionMismatch { expected: omega_dim(d), got: omega.len() });
    }
    let z = T::zero();
    Ok(match d {
        2 => Matrix::from_rows(&[vec![z, -omega[0]], vec![omega[0], z]]),
        _ => Matrix::from_rows(&[
            vec![z, -omega[2], omega[1]],
            vec![omega[2], z, -omega[0]],
            vec![-omega[1], omega[0], z],
        ]),
    })
}

/// Inverse of [`hat`]; reads the strictly lower/upper entries of a skew matrix.
pub fn vee<T: Real>(m: &Matrix<T>) -> Result<Vector<T>, LinalgError> {
    let d = m.rows();
    check_rotation_dim(d)?;
    Ok(match d {
        2 => Vector::from_vec(vec![m[(1, 0)]]),
        _ => Vector::from_vec(vec![m[(2, 1)], m[(0, 2)], m[(1, 0)]]),
    })
}

/// The `O_d` operator: the `d × d(d-1)/2` matrix with `hat(ω)·x = O_d(x)·ω`.
pub fn o_d<T: Real>(x: &Vector<T>) -> Result<Matrix<T>, LinalgError> {
    let d = x.len();
    check_rotation_dim(d)?;
    let k = omega_dim(d);
    let cols: Vec<Vector<T>> = (0..k)
        .map(|i| hat(d, &Vector::basis(k, i)).map(|h| h.matvec(x)))
        .collect::<Result<_, _>>()?;
    Ok(Matrix::from_columns(&cols))
}

/// `|QᵀQ - I|_F`.
pub fn orthonormality_error<T: Real>(q: &Matrix<T>) -> T {
    q.transpose().matmul(q).sub(&Matrix::identity(q.rows())).frobenius_norm()
}

/// Matrix exponential of `dt·ω̂` in closed form (planar rotation or Rodrigues).
pub fn exp_so<T: Real>(d: usize, omega: &Vector<T>, dt: T) -> Result<Matrix<T>, LinalgError> {
    let w_hat = hat(d, omega)?;
    if d == 2 {
        let angle = omega[0] * dt;
        let (s, c) = angle.sin_cos();
        return Ok(Matrix::from_rows(&[vec![c, -s], vec![s, c]]));
    }
    let theta = omega.norm() * dt;
    let identity = Matrix::identity(3);
    if theta == T::zero() {
        return Ok(identity);
    }
    let k = w_hat.scale(dt / theta);
    let k2 = k.matmul(&k);
    Ok(identity.add(&k.scale(theta.sin())).add(&k2.scale(T::one() - theta.cos())))
}

/// Projects a near-orthonormal matrix back onto SO(d).
///
/// d = 2 uses the exact angle of the closest rotation; d = 3 runs Newton–Schulz
/// polar iterations until the orthonormality residual stops improving.
pub fn reorthonormalize<T: Real>(q: &Matrix<T>) -> Result<Matrix<T>, LinalgError> {
    let d = q.rows();
    check_rotation_dim(d)?;
    if d == 2 {
        let angle = (q[(1, 0)] - q[(0, 1)]).atan2(q[(0, 0)] + q[(1, 1)]);
        let (s, c) = angle.sin_cos();
        return Ok(Matrix::from_rows(&[vec![c, -s], vec![s, c]]));
    }
    let three_i = Matrix::identity(3).scale(T::lit(3.0));
    let half = T::lit(0.5);
    let mut x = q.clone();
    let mut err = orthonormality_error(&x);
    for _ in 0..8 {
        let next = x.matmul(&three_i.sub(&x.transpose().matmul(&x))).scale(half);
        let next_err = orthonormality_error(&next);
        if next_err >= err {
            break;
        }
        x = next;
        err = next_err;
    }
    Ok(x)
}

/// Advances `Q̇ = Q·ω̂` by one step: `Q·exp(dt·ω̂)`, then re-projected onto SO(d).
pub fn integrate_rotation<T: Real>(
    q: &Matrix<T>,
    omega: &Vector<T>,
    dt: T,
) -> Result<Matrix<T>, LinalgError> {
    let d = q.rows();
    if q.cols() != d {
        return Err(LinalgError::DimensionMismatch { expected: d, got: q.cols() });
    }
    let err = orthonormality_error(q);
    if err > T::tolerance(1e-9) {
        return Err(LinalgError::NotOrthonormal(err.to_f64_lossy()));
    }
    let step = exp_so(d, omega, dt)?;
    reorthonormalize(&q.matmul(&step))
}

/// Planar rotation matrix by `angle` radians.
pub fn rotation2<T: Real>(angle: T) -> Matrix<T> {
    let (s, c) = angle.sin_cos();
    Matrix::from_rows(&[vec![c, -s], vec![s, c]])
}

/// Scaled orthogonal projection `P_v = |v|² I - v vᵀ`.
pub fn projection<T: Real>(v: &Vector<T>) -> Matrix<T> {
    Matrix::identity(v.len()).scale(v.norm_squared()).sub(&v.outer(v))
}

/// `Γ_{a,b} = Σ_i (a_iᵀb·I + a_i bᵀ)·∇a_i` for the columns `a_i` of `a`
/// and their Jacobians `∇a_i`.
pub fn gamma_op<T: Real>(
    a: &Matrix<T>,
    grads: &[Matrix<T>],
    b: &Vector<T>,
) -> Result<Matrix<T>, LinalgError> {
    let d = a.rows();
    if b.len() != d {
        return Err(LinalgError::DimensionMismatch { expected: d, got: b.len() });
    }
    if grads.len() != a.cols() {
        return Err(LinalgError::DimensionMismatch { expected: a.cols(), got: grads.len() });
    }
    let mut out = Matrix::zeros(d, d);
    for (i, grad) in grads.iter().enumerate() {
        if grad.rows() != d || grad.cols() != d {
            return Err(LinalgError::DimensionMismatch { expected: d, got: grad.rows() });
        }
        let ai = a.column(i);
        let factor = Matrix::identity(d).scale(ai.dot(b)).add(&ai.outer(b));
        out = out.add(&factor.matmul(grad));
    }
    Ok(out)
}
