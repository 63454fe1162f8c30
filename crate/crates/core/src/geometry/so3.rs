use nalgebra::{Rotation3, UnitQuaternion};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{skew, Mat3, Vec3};

const SMALL_ANGLE: f64 = 1e-8;
const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum RotationError {
    #[error("matrix is not orthonormal (|R R^T - I| = {0:e})")]
    NotOrthonormal(f64),
    #[error("matrix has determinant {0}, expected +1")]
    Reflection(f64),
}

/// A proper rotation stored as an orthonormal 3x3 matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rotation(Mat3);

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Mat3::identity())
    }

    /// Validates orthonormality and handedness to 1e-9.
    pub fn from_matrix(m: Mat3) -> Result<Self, RotationError> {
        let err = (m * m.transpose() - Mat3::identity()).norm();
        if err > ORTHONORMAL_TOL {
            return Err(RotationError::NotOrthonormal(err));
        }
        let det = m.determinant();
        if (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(RotationError::Reflection(det));
        }
        Ok(Rotation(m))
    }

    /// Wraps a matrix the caller knows to be a rotation.
    pub fn from_matrix_unchecked(m: Mat3) -> Self {
        Rotation(m)
    }

    /// Projects an arbitrary matrix onto SO(3) (closest in Frobenius norm).
    pub fn orthonormalize(m: &Mat3) -> Self {
        let svd = m.svd(true, true);
        let u = svd.u.expect("svd u");
        let v_t = svd.v_t.expect("svd v_t");
        let mut d = Mat3::identity();
        if (u * v_t).determinant() < 0.0 {
            d[(2, 2)] = -1.0;
        }
        Rotation(u * d * v_t)
    }

    pub fn exp(theta: &Vec3) -> Self {
        rodrigues(theta)
    }

    pub fn log(&self) -> Vec3 {
        so3_log(&self.0)
    }

    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        rodrigues(&(axis.normalize() * angle))
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>) -> Self {
        Rotation(*q.to_rotation_matrix().matrix())
    }

    /// Unit quaternion with non-negative scalar part.
    pub fn to_quaternion(&self) -> UnitQuaternion<f64> {
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.0));
        if q.w < 0.0 {
            UnitQuaternion::new_unchecked(-q.into_inner())
        } else {
            q
        }
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Rotation(self.0.transpose())
    }

    pub fn inverse(&self) -> Self {
        self.transpose()
    }

    /// Rotation angle in radians, in `[0, π]`.
    pub fn angle(&self) -> f64 {
        self.log().norm()
    }

    /// Geodesic distance to another rotation.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        (self.transpose() * *other).angle()
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }

    /// Geodesic interpolation: `self · exp(alpha · log(selfᵀ · other))`.
    pub fn slerp(&self, other: &Rotation, alpha: f64) -> Rotation {
        let delta = (self.transpose() * *other).log();
        *self * rodrigues(&(delta * alpha))
    }
}

impl std::ops::Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl std::ops::Mul<Vec3> for Rotation {
    type Output = Vec3;
    fn mul(self, rhs: Vec3) -> Vec3 {
        self.0 * rhs
    }
}

/// Exponential map of `skew(theta)`; the rotation angle equals `‖theta‖`.
///
/// Below 1e-8 rad the second-order Taylor expansion is used.
pub fn rodrigues(theta: &Vec3) -> Rotation {
    let angle = theta.norm();
    let w = skew(theta);
    if angle < SMALL_ANGLE {
        return Rotation(Mat3::identity() + w + 0.5 * w * w);
    }
    let a = angle.sin() / angle;
    let b = (1.0 - angle.cos()) / (angle * angle);
    Rotation(Mat3::identity() + a * w + b * w * w)
}

/// Logarithm of a rotation matrix as a rotation vector.
pub fn so3_log(m: &Mat3) -> Vec3 {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*m));
    let (w, v) = if q.w < 0.0 {
        (-q.w, -q.imag())
    } else {
        (q.w, q.imag())
    };
    let n = v.norm();
    if n < 1e-12 {
        // sin(θ/2) ≈ θ/2, cos(θ/2) ≈ 1
        return v * (2.0 / w);
    }
    let angle = 2.0 * n.atan2(w);
    v * (angle / n)
}

/// Inverse of the hat operator for (approximately) antisymmetric matrices.
pub fn vee(m: &Mat3) -> Vec3 {
    Vec3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// Left Jacobian of SO(3): `exp(φ + δ) ≈ exp(J_l(φ) δ) exp(φ)`.
pub fn so3_left_jacobian(phi: &Vec3) -> Mat3 {
    let angle = phi.norm();
    let w = skew(phi);
    let (a, b) = if angle < 1e-5 {
        let t2 = angle * angle;
        (0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
    } else {
        let t2 = angle * angle;
        ((1.0 - angle.cos()) / t2, (angle - angle.sin()) / (t2 * angle))
    };
    Mat3::identity() + a * w + b * w * w
}

/// Inverse of [`so3_left_jacobian`].
pub(crate) fn so3_left_jacobian_inv(phi: &Vec3) -> Mat3 {
    let angle = phi.norm();
    let w = skew(phi);
    let c = if angle < 1e-5 {
        1.0 / 12.0 + angle * angle / 720.0
    } else {
        1.0 / (angle * angle) - (1.0 + angle.cos()) / (2.0 * angle * angle.sin())
    };
    Mat3::identity() - 0.5 * w + c * w * w
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn rodrigues_zero_is_identity() {
        assert_eq!(rodrigues(&Vec3::zeros()), Rotation::identity());
    }

    #[test]
    fn rodrigues_quarter_turn_about_z() {
        let r = rodrigues(&Vec3::new(0.0, 0.0, FRAC_PI_2));
        let mapped = r * Vec3::x();
        assert!((mapped - Vec3::y()).norm() < 1e-15);
    }

    #[test]
    fn rodrigues_log_round_trip() {
        let theta = Vec3::new(0.1, 0.2, 0.3);
        let back = rodrigues(&theta).log();
        assert!((back - theta).norm() < 1e-10);
    }

    #[test]
    fn small_angle_branch_matches_closed_form() {
        let theta = Vec3::new(0.9e-8, -0.4e-8, 0.2e-8);
        let angle = theta.norm();
        let w = skew(&theta);
        let closed = Mat3::identity()
            + (angle.sin() / angle) * w
            + ((1.0 - angle.cos()) / (angle * angle)) * w * w;
        assert!((rodrigues(&theta).matrix() - closed).norm() < 1e-15);
        assert!((rodrigues(&theta).log() - theta).norm() < 1e-20);
    }

    #[test]
    fn from_matrix_rejects_reflection_and_shear() {
        let mut m = Mat3::identity();
        m[(2, 2)] = -1.0;
        assert!(matches!(Rotation::from_matrix(m), Err(RotationError::Reflection(_))));
        m[(2, 2)] = 1.0;
        m[(0, 1)] = 0.1;
        assert!(matches!(Rotation::from_matrix(m), Err(RotationError::NotOrthonormal(_))));
    }

    #[test]
    fn log_near_pi() {
        let theta = Vec3::new(0.0, 3.141592, 0.0);
        assert!((rodrigues(&theta).log() - theta).norm() < 1e-9);
    }

    #[test]
    fn left_jacobian_inverse_is_inverse() {
        for phi in [Vec3::new(0.3, -0.2, 0.9), Vec3::new(1e-7, 0.0, 2e-7)] {
            let prod = so3_left_jacobian(&phi) * so3_left_jacobian_inv(&phi);
            assert!((prod - Mat3::identity()).norm() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn transpose_equals_negated_angle(x in -2.0..2.0f64, y in -2.0..2.0f64, z in -2.0..2.0f64) {
            let theta = Vec3::new(x, y, z);
            let lhs = rodrigues(&theta).transpose();
            let rhs = rodrigues(&-theta);
            prop_assert!((lhs.matrix() - rhs.matrix()).norm() <= 1e-12);
        }

        #[test]
        fn exp_is_orthonormal(x in -3.0..3.0f64, y in -3.0..3.0f64, z in -3.0..3.0f64) {
            let r = rodrigues(&Vec3::new(x, y, z));
            prop_assert!((r.matrix() * r.matrix().transpose() - Mat3::identity()).norm() < 1e-9);
            prop_assert!((r.matrix().determinant() - 1.0).abs() < 1e-9);
        }
    }
}
