//! Near-identity diffeomorphism from single-integrator velocity commands to
//! unicycle `(v, w)` commands through an offset point ahead of the axle.
//!
//! The simulator stays single-integrator; this module is a post-processing
//! transform for deployment on differential-drive robots.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

/// Default look-ahead distance of the offset point, in metres.
pub const DEFAULT_OFFSET: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum UnicycleError {
    #[error("offset distance must be positive and finite, got {0}")]
    InvalidOffset(f64),
}

/// Planar pose `[x, y, θ]` with the heading wrapped to `(-π, π]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnicyclePose<T> {
    pub x: T,
    pub y: T,
    theta: T,
}

/// Wraps an angle to `(-π, π]`.
pub fn wrap_angle<T: Real>(theta: T) -> T {
    let pi = T::lit(std::f64::consts::PI);
    let two_pi = pi + pi;
    let mut t = theta - two_pi * (theta / two_pi).round();
    // round() leaves the result in [-π, π]; move the closed lower end up.
    if t <= -pi {
        t += two_pi;
    }
    if t > pi {
        t -= two_pi;
    }
    t
}

impl<T: Real> UnicyclePose<T> {
    pub fn new(x: T, y: T, theta: T) -> Self {
        Self { x, y, theta: wrap_angle(theta) }
    }

    pub fn theta(&self) -> T {
        self.theta
    }

    /// Point at distance `l` ahead of the axle along the heading.
    pub fn offset_point(&self, l: T) -> [T; 2] {
        let (s, c) = self.theta.sin_cos();
        [self.x + l * c, self.y + l * s]
    }

    /// Exact integration of `ẋ = v cosθ, ẏ = v sinθ, θ̇ = w` over `dt` with
    /// constant inputs.
    pub fn integrate(&self, v: T, w: T, dt: T) -> Self {
        let th = self.theta;
        let dth = w * dt;
        let (dx, dy) = if dth.abs() < T::tolerance(1e-9) {
            // Second-order expansion of the arc; avoids dividing by w.
            let mid = th + dth / T::lit(2.0);
            (v * dt * mid.cos(), v * dt * mid.sin())
        } else {
            let r = v / w;
            (r * ((th + dth).sin() - th.sin()), -r * ((th + dth).cos() - th.cos()))
        };
        Self::new(self.x + dx, self.y + dy, th + dth)
    }
}

fn check_offset<T: Real>(l: T) -> Result<(), UnicycleError> {
    if !(l > T::zero()) || !l.is_finite() {
        return Err(UnicycleError::InvalidOffset(l.to_f64_lossy()));
    }
    Ok(())
}

/// Maps a desired offset-point velocity `u` to `(v, w)`:
/// `v = cosθ u_x + sinθ u_y`, `w = (-sinθ u_x + cosθ u_y) / l`.
pub fn nid_map<T: Real>(u: [T; 2], pose: &UnicyclePose<T>, l: T) -> Result<(T, T), UnicycleError> {
    check_offset(l)?;
    let (s, c) = pose.theta.sin_cos();
    Ok((c * u[0] + s * u[1], (c * u[1] - s * u[0]) / l))
}

/// Inverse of [`nid_map`]: the offset-point velocity produced by `(v, w)`.
pub fn nid_inverse<T: Real>(v: T, w: T, pose: &UnicyclePose<T>, l: T) -> Result<[T; 2], UnicycleError> {
    check_offset(l)?;
    let (s, c) = pose.theta.sin_cos();
    let lw = l * w;
    Ok([c * v - s * lw, s * v + c * lw])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn aligned_heading_passes_through() {
        let pose = UnicyclePose::new(0.0, 0.0, 0.0);
        assert_eq!(nid_map([1.0, 0.0], &pose, 0.1).unwrap(), (1.0, 0.0));
    }

    #[test]
    fn lateral_command_turns_in_place() {
        let pose = UnicyclePose::new(0.0, 0.0, 0.0);
        let (v, w) = nid_map([0.0, 1.0], &pose, 0.1).unwrap();
        assert_abs_diff_eq!(v, 0.0);
        assert_abs_diff_eq!(w, 10.0, epsilon = 1e-12);
    }

    #[test]
    fn rejects_non_positive_offset() {
        let pose = UnicyclePose::new(0.0, 0.0, 0.0);
        assert!(nid_map([1.0, 0.0], &pose, 0.0).is_err());
        assert!(nid_map([1.0, 0.0], &pose, -0.1).is_err());
        assert!(nid_inverse(1.0, 0.0, &pose, f64::NAN).is_err());
    }

    #[test]
    fn heading_is_wrapped() {
        let pi = std::f64::consts::PI;
        assert_abs_diff_eq!(UnicyclePose::new(0.0, 0.0, -pi).theta(), pi);
        assert_abs_diff_eq!(UnicyclePose::new(0.0, 0.0, 3.0 * pi).theta(), pi, epsilon = 1e-12);
        assert_abs_diff_eq!(UnicyclePose::new(0.0, 0.0, 7.0).theta(), 7.0 - 2.0 * pi, epsilon = 1e-12);
    }

    #[test]
    fn straight_line_integration() {
        let p = UnicyclePose::new(1.0, 2.0, 0.5).integrate(2.0, 0.0, 0.25);
        assert_abs_diff_eq!(p.x, 1.0 + 0.5 * 0.5f64.cos(), epsilon = 1e-14);
        assert_abs_diff_eq!(p.y, 2.0 + 0.5 * 0.5f64.sin(), epsilon = 1e-14);
    }
}
