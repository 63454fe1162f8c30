//! Lie-group and epipolar primitives shared by every pipeline stage.
//!
//! Rotations and poses are stored in matrix form. Tangent vectors of SE(3)
//! are ordered `[ω; ρ]` (rotation first, radians; then translation, scene
//! units) everywhere in the crate.

mod epipolar;
mod intrinsics;
mod pose;
mod so3;

pub use epipolar::{eight_point, essential_from_f, EpipolarError, FundamentalMatrix, PixelMatch};
pub(crate) use epipolar::sorted_singular_values;
pub use intrinsics::{Intrinsics, IntrinsicsError};
pub use pose::{InterpolationError, se3_adjoint, se3_exp, se3_interpolate, se3_log, se3_right_jacobian_inv, Pose};
pub use so3::{rodrigues, so3_left_jacobian, so3_log, vee, Rotation, RotationError};

use nalgebra::{Matrix3, Matrix6, Vector2, Vector3, Vector6};

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;
pub type Vec6 = Vector6<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Mat6 = Matrix6<f64>;

/// Cross-product matrix: `skew(v) * w == v.cross(&w)`.
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn skew_zero_is_zero() {
        assert_eq!(skew(&Vec3::zeros()), Mat3::zeros());
    }

    #[test]
    fn skew_unit_z() {
        let s = skew(&Vec3::z());
        assert_eq!(s, Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn skew_matches_cross_product() {
        let v = Vec3::new(1.0, 2.0, 3.0);
        let w = Vec3::new(4.0, 5.0, 6.0);
        // (2*6-3*5, 3*4-1*6, 1*5-2*4)
        assert_eq!(skew(&v) * w, Vec3::new(-3.0, 6.0, -3.0));
    }

    #[test]
    fn skew_annihilates_own_vector() {
        let v = Vec3::new(0.3, -1.7, 2.2);
        assert!((skew(&v) * v).norm() <= 1e-12);
        let s = skew(&v);
        assert_eq!(s, -s.transpose());
    }
}
