//! Rotation-group primitives.
//!
//! Vectors and matrices are `nalgebra` types. `Mat3::new` takes its nine
//! arguments in row-major order, so `Mat3::new(a, b, c, d, ...)` reads as
//! rows `[a b c]`, `[d ...]`, independent of the column-major storage.
//!
//! Rotation vectors are deliberately not confined to the ball `|phi| <= pi`:
//! [`log_so3`] picks the branch closest to a caller-supplied hint so that
//! a sequence of logarithms stays continuous when the angle crosses `pi`.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Below this angle the Rodrigues and Bortz coefficients switch to their
/// Taylor series.
pub const SMALL_ANGLE: f64 = 1e-4;

/// Distance to a nonzero multiple of `2 pi` at which the Bortz rate is
/// reported as singular.
pub const BORTZ_SINGULAR_TOL: f64 = 1e-6;

const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum So3Error {
    #[error("matrix is not a rotation (orthonormality defect {defect:.3e}, det {det})")]
    NotARotation { defect: f64, det: f64 },
    #[error("Bortz rate is singular at rotation angle {angle} (multiple of 2 pi)")]
    BortzSingularity { angle: f64 },
    #[error("non-finite rotation vector hint")]
    NonFiniteHint,
}

/// Direction cosine matrix (body to inertial).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationMatrix(Mat3);

impl RotationMatrix {
    pub fn identity() -> Self {
        Self(Mat3::identity())
    }

    /// Checks orthonormality and orientation before wrapping.
    pub fn try_new(m: Mat3) -> Result<Self, So3Error> {
        let defect = (m.transpose() * m - Mat3::identity()).norm();
        let det = m.determinant();
        if !m.iter().all(|v| v.is_finite())
            || defect > ORTHONORMAL_TOL
            || (det - 1.0).abs() > ORTHONORMAL_TOL
        {
            return Err(So3Error::NotARotation { defect, det });
        }
        Ok(Self(m))
    }

    /// Wraps `m` without checking. Callers guarantee it is a rotation.
    pub fn from_matrix_unchecked(m: Mat3) -> Self {
        Self(m)
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn compose(&self, other: &RotationMatrix) -> Self {
        Self(self.0 * other.0)
    }

    pub fn apply(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }

    /// Frobenius norm of `m^T m - I`.
    pub fn orthonormality_defect(&self) -> f64 {
        (self.0.transpose() * self.0 - Mat3::identity()).norm()
    }

    /// Projects back onto SO(3) with the polar decomposition `m (m^T m)^{-1/2}`.
    pub fn reorthonormalize(&self) -> Self {
        let svd = self.0.svd(true, true);
        let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * v_t;
        if r.determinant() < 0.0 {
            // Only reachable for badly corrupted inputs.
            let mut u = u;
            u.column_mut(2).neg_mut();
            r = u * v_t;
        }
        Self(r)
    }
}

impl std::ops::Mul for RotationMatrix {
    type Output = RotationMatrix;
    fn mul(self, rhs: RotationMatrix) -> RotationMatrix {
        self.compose(&rhs)
    }
}

/// Axis-angle vector, `|phi|` is the rotation angle in radians.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RotationVector(pub Vec3);

impl RotationVector {
    pub fn zero() -> Self {
        Self(Vec3::zeros())
    }

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self(Vec3::new(x, y, z))
    }

    pub fn angle(&self) -> f64 {
        self.0.norm()
    }

    pub fn vector(&self) -> &Vec3 {
        &self.0
    }
}

impl From<Vec3> for RotationVector {
    fn from(v: Vec3) -> Self {
        Self(v)
    }
}

/// Cross-product matrix: `skew(v) * w == v.cross(&w)`.
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`skew`] on the antisymmetric part of `m`.
pub fn vee(m: &Mat3) -> Vec3 {
    0.5 * Vec3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)])
}

/// `sin(t)/t` and `(1 - cos t)/t^2`.
fn rodrigues_coefficients(theta: f64) -> (f64, f64) {
    if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (1.0 - t2 / 6.0 + t2 * t2 / 120.0, 0.5 - t2 / 24.0 + t2 * t2 / 720.0)
    } else {
        let h = (0.5 * theta).sin() / theta;
        (theta.sin() / theta, 2.0 * h * h)
    }
}

pub fn exp_so3(phi: &RotationVector) -> RotationMatrix {
    let theta = phi.angle();
    let (a, b) = rodrigues_coefficients(theta);
    let k = skew(&phi.0);
    RotationMatrix(Mat3::identity() + a * k + b * (k * k))
}

/// Principal logarithm: unit axis and angle in `[0, pi]`.
fn principal_axis_angle(r: &Mat3) -> (Vec3, f64) {
    let w = vee(r);
    let s = w.norm();
    let c = 0.5 * (r.trace() - 1.0);
    let theta = s.atan2(c);
    if theta < SMALL_ANGLE {
        // phi = w * theta / sin(theta)
        let t2 = theta * theta;
        let scale = 1.0 + t2 / 6.0 + 7.0 * t2 * t2 / 360.0;
        let phi = w * scale;
        let n = phi.norm();
        if n == 0.0 {
            return (Vec3::x(), 0.0);
        }
        return (phi / n, n);
    }
    if theta < 0.75 * PI {
        return (w / s, theta);
    }
    // Near pi the antisymmetric part vanishes. Recover the axis from
    // (R + R^T)/2 = cos(t) I + (1 - cos t) a a^T using the largest diagonal.
    let sym = 0.5 * (r + r.transpose());
    let outer = (sym - c * Mat3::identity()) / (1.0 - c);
    let i = (0..3)
        .max_by(|&p, &q| outer[(p, p)].total_cmp(&outer[(q, q)]))
        .unwrap_or(0);
    let ai = outer[(i, i)].max(0.0).sqrt();
    let mut axis = Vec3::zeros();
    for j in 0..3 {
        axis[j] = if j == i { ai } else { outer[(i, j)] / ai };
    }
    axis.normalize_mut();
    if axis.dot(&w) < 0.0 {
        axis = -axis;
    }
    (axis, theta)
}

/// Rotation vector of `r` on the branch closest to `hint`.
///
/// Candidates are `(theta + 2 pi k) a` for `k` in `-2..=2`, where `(a,
/// theta)` is the principal axis-angle; `k = -1` is the mirrored branch
/// `(2 pi - theta)(-a)`. When `theta` is within rounding of `pi` the sign
/// of `a` is undetermined, so the flipped axis is searched as well.
pub fn log_so3(r: &RotationMatrix, hint: &RotationVector) -> Result<RotationVector, So3Error> {
    if !hint.0.iter().all(|v| v.is_finite()) {
        return Err(So3Error::NonFiniteHint);
    }
    let (axis, theta) = principal_axis_angle(&r.0);
    let mut best = axis * theta;
    let mut best_dist = (best - hint.0).norm();
    let mut consider = |cand: Vec3| {
        let d = (cand - hint.0).norm();
        if d < best_dist {
            best_dist = d;
            best = cand;
        }
    };
    for k in -2i32..=2 {
        consider(axis * (theta + 2.0 * PI * k as f64));
    }
    if PI - theta < 1e-6 {
        let flipped = -axis;
        if (exp_so3(&RotationVector(flipped * theta)).0 - r.0).norm() <= 1e-9 {
            for k in -2i32..=2 {
                consider(flipped * (theta + 2.0 * PI * k as f64));
            }
        }
    }
    Ok(RotationVector(best))
}

/// `(1 - (t/2) cot(t/2)) / t^2`, the coefficient of `phi x (phi x omega)`.
/// The closed form cancels catastrophically for small angles, so the series
/// takes over well above [`SMALL_ANGLE`].
const BORTZ_SERIES_ANGLE: f64 = 1e-2;

fn bortz_coefficient(theta: f64) -> f64 {
    if theta < BORTZ_SERIES_ANGLE {
        let t2 = theta * theta;
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    } else {
        let h = (0.5 * theta).sin();
        (1.0 - theta * theta.sin() / (4.0 * h * h)) / (theta * theta)
    }
}

/// Rotation-vector rate for body rate `omega`.
pub fn bortz_rate(phi: &RotationVector, omega: &Vec3) -> Result<Vec3, So3Error> {
    let theta = phi.angle();
    let k = (theta / (2.0 * PI)).round();
    if k >= 1.0 && (theta - 2.0 * PI * k).abs() < BORTZ_SINGULAR_TOL {
        return Err(So3Error::BortzSingularity { angle: theta });
    }
    let p = &phi.0;
    let pxw = p.cross(omega);
    Ok(omega + 0.5 * pxw + bortz_coefficient(theta) * p.cross(&pxw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vec3() -> impl Strategy<Value = Vec3> {
        (-2.0..2.0f64, -2.0..2.0f64, -2.0..2.0f64).prop_map(|(x, y, z)| Vec3::new(x, y, z))
    }

    #[test]
    fn skew_matches_definition() {
        let m = skew(&Vec3::new(1.0, 2.0, 3.0));
        assert_eq!(m, Mat3::new(0.0, -3.0, 2.0, 3.0, 0.0, -1.0, -2.0, 1.0, 0.0));
        assert_eq!(skew(&Vec3::x()) * Vec3::y(), Vec3::z());
        assert_eq!(skew(&Vec3::zeros()), Mat3::zeros());
    }

    #[test]
    fn exp_quarter_turn_about_x() {
        let r = exp_so3(&RotationVector::new(PI / 2.0, 0.0, 0.0));
        let want = Mat3::new(1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0);
        assert!((r.matrix() - want).norm() < 1e-15);
        assert_eq!(exp_so3(&RotationVector::zero()).matrix(), &Mat3::identity());
    }

    #[test]
    fn log_identity_is_zero() {
        let phi = log_so3(&RotationMatrix::identity(), &RotationVector::zero()).unwrap();
        assert_eq!(phi.0, Vec3::zeros());
    }

    #[test]
    fn log_exactly_at_pi_recovers_axis() {
        let axis = Vec3::new(1.0, 2.0, -2.0).normalize();
        let r = exp_so3(&RotationVector(axis * PI));
        let phi = log_so3(&r, &RotationVector(axis * 3.0)).unwrap();
        assert!((phi.0 - axis * PI).norm() < 1e-9, "{phi:?}");
        let phi = log_so3(&r, &RotationVector(-axis * 3.0)).unwrap();
        assert!((phi.0 + axis * PI).norm() < 1e-9, "{phi:?}");
    }

    #[test]
    fn log_is_continuous_through_pi() {
        let rate = 1.3;
        let mut hint = RotationVector::zero();
        let mut prev_angle = 0.0;
        for k in 0..400 {
            let t = k as f64 * 0.01;
            let r = exp_so3(&RotationVector::new(t * rate, 0.0, 0.0));
            let phi = log_so3(&r, &hint).unwrap();
            assert!((phi.0 - Vec3::new(t * rate, 0.0, 0.0)).norm() < 1e-9, "t={t}: {phi:?}");
            assert!(phi.0.x >= prev_angle);
            prev_angle = phi.0.x;
            hint = phi;
        }
        assert!(prev_angle > PI + 1.0);
    }

    #[test]
    fn bortz_limits() {
        let w = Vec3::new(0.3, -0.2, 0.5);
        assert_eq!(bortz_rate(&RotationVector::zero(), &w).unwrap(), w);
        let phi = RotationVector(w * 2.1);
        assert!((bortz_rate(&phi, &w).unwrap() - w).norm() < 1e-15);
    }

    #[test]
    fn bortz_singular_near_two_pi() {
        let phi = RotationVector::new(2.0 * PI + 1e-8, 0.0, 0.0);
        assert!(matches!(
            bortz_rate(&phi, &Vec3::y()),
            Err(So3Error::BortzSingularity { .. })
        ));
        assert!(bortz_rate(&RotationVector::new(2.0 * PI + 1e-3, 0.0, 0.0), &Vec3::y()).is_ok());
    }

    #[test]
    fn coefficients_are_continuous_at_the_series_switch() {
        {
            let f = rodrigues_coefficients as fn(f64) -> (f64, f64);
            let (a0, b0) = f(SMALL_ANGLE * (1.0 - 1e-9));
            let (a1, b1) = f(SMALL_ANGLE * (1.0 + 1e-9));
            assert!((a0 - a1).abs() < 1e-12 && (b0 - b1).abs() < 1e-12);
        }
        let c0 = bortz_coefficient(BORTZ_SERIES_ANGLE * (1.0 - 1e-9));
        let c1 = bortz_coefficient(BORTZ_SERIES_ANGLE * (1.0 + 1e-9));
        assert!((c0 - c1).abs() < 1e-10);
    }

    #[test]
    fn try_new_rejects_reflection() {
        let m = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, -1.0));
        assert!(RotationMatrix::try_new(m).is_err());
        assert!(RotationMatrix::try_new(*exp_so3(&RotationVector::new(0.1, 0.2, 0.3)).matrix()).is_ok());
    }

    #[test]
    fn reorthonormalize_removes_drift() {
        let r = exp_so3(&RotationVector::new(0.4, -1.0, 0.2));
        let noisy = RotationMatrix::from_matrix_unchecked(r.matrix() + Mat3::repeat(1e-6));
        let fixed = noisy.reorthonormalize();
        assert!(fixed.orthonormality_defect() < 1e-14);
        assert!((fixed.matrix() - r.matrix()).norm() < 1e-5);
    }

    proptest! {
        #[test]
        fn skew_is_anticommutative(v in vec3(), w in vec3()) {
            prop_assert!((skew(&v) * w + skew(&w) * v).norm() < 1e-14);
        }

        #[test]
        fn exp_is_a_rotation(v in vec3()) {
            let r = exp_so3(&RotationVector(v));
            prop_assert!(r.orthonormality_defect() < 1e-12);
            prop_assert!((r.matrix().determinant() - 1.0).abs() < 1e-12);
            prop_assert!((r.matrix().trace() - (1.0 + 2.0 * v.norm().cos())).abs() < 1e-12);
            prop_assert!((r.apply(&v) - v).norm() < 1e-12);
        }

        #[test]
        fn conjugation_identity(v in vec3(), w in vec3()) {
            let r = exp_so3(&RotationVector(w));
            let rt = r.matrix().transpose();
            let lhs = skew(&(rt * v));
            let rhs = rt * skew(&v) * r.matrix();
            prop_assert!((lhs - rhs).norm() < 1e-12);
        }

        #[test]
        fn log_roundtrip(v in vec3()) {
            prop_assume!(v.norm() <= PI - 0.01);
            let r = exp_so3(&RotationVector(v));
            let phi = log_so3(&r, &RotationVector::zero()).unwrap();
            prop_assert!((phi.0 - v).norm() < 1e-9);
        }
    }
}
