use serde::{Deserialize, Serialize};

use super::so3::{so3_left_jacobian, so3_left_jacobian_inv};
use super::{rodrigues, skew, Mat3, Mat6, Rotation, Vec3, Vec6};

/// Rigid-body transform on SE(3), optionally stamped with a time in seconds.
///
/// A pose `T` maps points from its own frame into the parent frame:
/// `x_parent = R x + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vec3,
    #[serde(default)]
    pub timestamp: Option<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Rotation::identity(),
            translation: Vec3::zeros(),
            timestamp: None,
        }
    }

    pub fn new(rotation: Rotation, translation: Vec3) -> Self {
        Pose {
            rotation,
            translation,
            timestamp: None,
        }
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Pose::new(Rotation::identity(), translation)
    }

    pub fn with_timestamp(mut self, t: f64) -> Self {
        self.timestamp = Some(t);
        self
    }

    pub fn without_timestamp(mut self) -> Self {
        self.timestamp = None;
        self
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose::new(rt, -(rt * self.translation))
    }

    /// Optical center / origin of this frame expressed in the parent frame.
    pub fn position(&self) -> Vec3 {
        self.translation
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * *p + self.translation
    }

    /// `self⁻¹ · other`, the pose of `other` expressed in this frame.
    pub fn between(&self, other: &Pose) -> Pose {
        self.inverse() * *other
    }

    pub fn scaled_translation(&self, s: f64) -> Pose {
        Pose {
            rotation: self.rotation,
            translation: self.translation * s,
            timestamp: self.timestamp,
        }
    }

    pub fn matrix(&self) -> nalgebra::Matrix4<f64> {
        let mut m = nalgebra::Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Rotation distance (Frobenius) plus translation distance, the yardstick
    /// used by identity checks.
    pub fn distance_to_identity(&self) -> (f64, f64) {
        (
            (self.rotation.matrix() - Mat3::identity()).norm(),
            self.translation.norm(),
        )
    }
}

/// Composition keeps the right operand's timestamp: `T_{k→w} · T_local`
/// is still "the pose at the local frame's time".
impl std::ops::Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        Pose {
            rotation: self.rotation * rhs.rotation,
            translation: self.rotation * rhs.translation + self.translation,
            timestamp: rhs.timestamp,
        }
    }
}

/// Split SE(3) interpolation: geodesic on rotation, linear on translation.
///
/// `alpha = 0` returns `a` and `alpha = 1` returns `b` bit-for-bit.
pub fn se3_interpolate(a: &Pose, b: &Pose, alpha: f64) -> Result<Pose, InterpolationError> {
    if !(0.0..=1.0).contains(&alpha) || alpha.is_nan() {
        return Err(InterpolationError(alpha));
    }
    if alpha == 0.0 {
        return Ok(*a);
    }
    if alpha == 1.0 {
        return Ok(*b);
    }
    let rotation = a.rotation.slerp(&b.rotation, alpha);
    let translation = a.translation + (b.translation - a.translation) * alpha;
    let timestamp = match (a.timestamp, b.timestamp) {
        (Some(ta), Some(tb)) => Some(ta + (tb - ta) * alpha),
        _ => None,
    };
    Ok(Pose {
        rotation,
        translation,
        timestamp,
    })
}

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("interpolation parameter {0} outside [0, 1]")]
pub struct InterpolationError(pub f64);

fn se3_v_matrix(omega: &Vec3) -> Mat3 {
    so3_left_jacobian(omega)
}

/// Exponential map from a twist `[ω; ρ]`.
pub fn se3_exp(xi: &Vec6) -> Pose {
    let omega = xi.fixed_rows::<3>(0).into_owned();
    let rho = xi.fixed_rows::<3>(3).into_owned();
    Pose::new(rodrigues(&omega), se3_v_matrix(&omega) * rho)
}

/// Logarithm map returning a twist `[ω; ρ]`.
pub fn se3_log(pose: &Pose) -> Vec6 {
    let omega = pose.rotation.log();
    let rho = so3_left_jacobian_inv(&omega) * pose.translation;
    let mut xi = Vec6::zeros();
    xi.fixed_rows_mut::<3>(0).copy_from(&omega);
    xi.fixed_rows_mut::<3>(3).copy_from(&rho);
    xi
}

/// Adjoint of `T`: `T · exp(δ) = exp(Ad_T δ) · T`.
pub fn se3_adjoint(pose: &Pose) -> Mat6 {
    let r = *pose.rotation.matrix();
    let mut ad = Mat6::zeros();
    ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
    ad.fixed_view_mut::<3, 3>(3, 0)
        .copy_from(&(skew(&pose.translation) * r));
    ad
}

/// Coupling block of the SE(3) left Jacobian for `[ω; ρ]` ordering.
fn se3_q_block(omega: &Vec3, rho: &Vec3) -> Mat3 {
    let theta = omega.norm();
    let w = skew(omega);
    let p = skew(rho);
    let t2 = theta * theta;
    let (c1, c2, c3) = if theta < 1e-4 {
        (
            1.0 / 6.0 - t2 / 120.0,
            1.0 / 24.0 - t2 / 720.0,
            1.0 / 120.0 - t2 / 2520.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        (
            (theta - s) / (t2 * theta),
            (t2 + 2.0 * c - 2.0) / (2.0 * t2 * t2),
            (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t2 * t2 * theta),
        )
    };
    let wp = w * p;
    let pw = p * w;
    let wpw = w * p * w;
    0.5 * p + c1 * (wp + pw + wpw) + c2 * (w * wp + pw * w - 3.0 * wpw) + c3 * (wpw * w + w * wpw)
}

fn se3_left_jacobian_inv(xi: &Vec6) -> Mat6 {
    let omega = xi.fixed_rows::<3>(0).into_owned();
    let rho = xi.fixed_rows::<3>(3).into_owned();
    let j_inv = so3_left_jacobian_inv(&omega);
    let q = se3_q_block(&omega, &rho);
    let mut out = Mat6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&j_inv);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&j_inv);
    out.fixed_view_mut::<3, 3>(3, 0)
        .copy_from(&(-j_inv * q * j_inv));
    out
}

/// Inverse right Jacobian: `log(exp(ξ)·exp(δ)) ≈ ξ + J_r⁻¹(ξ) δ`.
pub fn se3_right_jacobian_inv(xi: &Vec6) -> Mat6 {
    se3_left_jacobian_inv(&(-xi))
}
