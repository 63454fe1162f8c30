use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Mat3, Vec2, Vec3};

#[derive(Debug, Error, PartialEq)]
pub enum IntrinsicsError {
    #[error("focal lengths must be positive (fx = {fx}, fy = {fy})")]
    NonPositiveFocal { fx: f64, fy: f64 },
}

/// Pinhole intrinsics in pixels (no skew, no lens distortion).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, IntrinsicsError> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(IntrinsicsError::NonPositiveFocal { fx, fy });
        }
        Ok(Intrinsics { fx, fy, cx, cy })
    }

    pub fn matrix(&self) -> Mat3 {
        Mat3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Mat3 {
        Mat3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Focal lengths multiplied by `(sx, sy)`, principal point unchanged.
    pub fn scaled(&self, sx: f64, sy: f64) -> Intrinsics {
        Intrinsics {
            fx: self.fx * sx,
            fy: self.fy * sy,
            ..*self
        }
    }

    /// Projects a camera-frame point; `None` when it is not in front.
    pub fn project(&self, p: &Vec3) -> Option<Vec2> {
        if p.z <= 0.0 {
            return None;
        }
        Some(Vec2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }

    /// Back-projects a pixel at the given z-depth.
    pub fn back_project(&self, pixel: &Vec2, depth: f64) -> Vec3 {
        Vec3::new(
            (pixel.x - self.cx) / self.fx * depth,
            (pixel.y - self.cy) / self.fy * depth,
            depth,
        )
    }

    /// Unit-depth ray through a pixel.
    pub fn ray(&self, pixel: &Vec2) -> Vec3 {
        self.back_project(pixel, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_is_upper_triangular() {
        let k = Intrinsics::new(700.0, 710.0, 320.0, 240.0).unwrap();
        let m = k.matrix();
        assert_eq!(m.row(2), nalgebra::RowVector3::new(0.0, 0.0, 1.0));
        assert_eq!(m[(1, 0)], 0.0);
        assert!((m * k.inverse_matrix() - Mat3::identity()).norm() < 1e-15);
    }

    #[test]
    fn rejects_non_positive_focal() {
        assert!(Intrinsics::new(0.0, 1.0, 0.0, 0.0).is_err());
        assert!(Intrinsics::new(1.0, -1.0, 0.0, 0.0).is_err());
        assert!(Intrinsics::new(f64::NAN, 1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn project_back_project_round_trip() {
        let k = Intrinsics::new(718.0, 718.0, 620.0, 188.0).unwrap();
        let p = Vec3::new(1.5, -0.4, 12.0);
        let px = k.project(&p).unwrap();
        assert!((k.back_project(&px, 12.0) - p).norm() < 1e-12);
        assert!(k.project(&Vec3::new(0.0, 0.0, -1.0)).is_none());
    }
}
