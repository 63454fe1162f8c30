//! Closed-form point-set alignment.

use nalgebra::Matrix3;

use crate::geometry::{Mat3, Pose, Rotation, Vec3};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AlignError {
    #[error("alignment needs at least {required} correspondences, got {found}")]
    TooFew { required: usize, found: usize },
    #[error("point sets have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("source points are degenerate")]
    Degenerate,
}

/// `y = s R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub rotation: Rotation,
    pub translation: Vec3,
    pub scale: f64,
}

impl Similarity {
    pub fn identity() -> Self {
        Similarity {
            rotation: Rotation::identity(),
            translation: Vec3::zeros(),
            scale: 1.0,
        }
    }

    pub fn apply(&self, x: &Vec3) -> Vec3 {
        self.rotation * (x * self.scale) + self.translation
    }

    /// Applies the similarity to a camera pose (scaling its position).
    pub fn apply_pose(&self, p: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * p.rotation,
            translation: self.apply(&p.translation),
            timestamp: p.timestamp,
        }
    }

    pub fn rigid(&self) -> Pose {
        Pose::new(self.rotation, self.translation)
    }
}

/// Least-squares similarity (or rigid transform when `with_scale` is false)
/// mapping `src` onto `dst`.
pub fn umeyama(src: &[Vec3], dst: &[Vec3], with_scale: bool) -> Result<Similarity, AlignError> {
    if src.len() != dst.len() {
        return Err(AlignError::LengthMismatch(src.len(), dst.len()));
    }
    let n = src.len();
    if n < 2 {
        return Err(AlignError::TooFew { required: 2, found: n });
    }
    let inv_n = 1.0 / n as f64;
    let mu_s = src.iter().sum::<Vec3>() * inv_n;
    let mu_d = dst.iter().sum::<Vec3>() * inv_n;
    let mut cov = Mat3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let a = s - mu_s;
        cov += (d - mu_d) * a.transpose();
        var_s += a.norm_squared();
    }
    cov *= inv_n;
    var_s *= inv_n;
    if !(var_s > 0.0) {
        return Err(AlignError::Degenerate);
    }
    let svd = cov.svd(true, true);
    let u = svd.u.ok_or(AlignError::Degenerate)?;
    let vt = svd.v_t.ok_or(AlignError::Degenerate)?;
    let mut sign = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    let r = u * sign * vt;
    let scale = if with_scale {
        (svd.singular_values.component_mul(&sign.diagonal())).sum() / var_s
    } else {
        1.0
    };
    let rotation = Rotation::from_matrix_unchecked(r);
    let translation = mu_d - rotation * (mu_s * scale);
    Ok(Similarity {
        rotation,
        translation,
        scale,
    })
}

/// Similarity mapping estimated poses onto reference poses using their
/// orientations: the rotation is the chordal mean of `R_ref R_estᵀ`, then
/// scale and translation are least squares on positions.
///
/// Unlike [`umeyama`] on positions alone this stays well posed for straight
/// trajectories.
pub fn pose_alignment(est: &[Pose], reference: &[Pose], with_scale: bool) -> Result<Similarity, AlignError> {
    if est.len() != reference.len() {
        return Err(AlignError::LengthMismatch(est.len(), reference.len()));
    }
    if est.is_empty() {
        return Err(AlignError::TooFew { required: 1, found: 0 });
    }
    let mut m = Mat3::zeros();
    for (e, r) in est.iter().zip(reference) {
        m += r.rotation.matrix() * e.rotation.matrix().transpose();
    }
    let svd = m.svd(true, true);
    let u = svd.u.ok_or(AlignError::Degenerate)?;
    let vt = svd.v_t.ok_or(AlignError::Degenerate)?;
    let mut sign = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    let rotation = Rotation::from_matrix_unchecked(u * sign * vt);
    let inv_n = 1.0 / est.len() as f64;
    let mu_e = est.iter().map(|p| p.translation).sum::<Vec3>() * inv_n;
    let mu_r = reference.iter().map(|p| p.translation).sum::<Vec3>() * inv_n;
    let scale = if with_scale {
        let (mut num, mut den) = (0.0, 0.0);
        for (e, r) in est.iter().zip(reference) {
            let a = rotation * (e.translation - mu_e);
            num += a.dot(&(r.translation - mu_r));
            den += a.norm_squared();
        }
        if !(den > 0.0) {
            return Err(AlignError::Degenerate);
        }
        num / den
    } else {
        1.0
    };
    Ok(Similarity {
        rotation,
        translation: mu_r - rotation * (mu_e * scale),
        scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rodrigues;

    fn points() -> Vec<Vec3> {
        (0..20)
            .map(|i| {
                let s = i as f64;
                Vec3::new(s.sin() * 3.0, (0.7 * s).cos(), 0.1 * s * s)
            })
            .collect()
    }

    #[test]
    fn recovers_known_similarity() {
        let truth = Similarity {
            rotation: rodrigues(&Vec3::new(0.3, -0.5, 1.1)),
            translation: Vec3::new(1.0, -2.0, 0.5),
            scale: 2.5,
        };
        let src = points();
        let dst: Vec<Vec3> = src.iter().map(|p| truth.apply(p)).collect();
        let est = umeyama(&src, &dst, true).unwrap();
        assert!((est.scale - 2.5).abs() < 1e-12);
        assert!(est.rotation.angle_to(&truth.rotation) < 1e-12);
        assert!((est.translation - truth.translation).norm() < 1e-11);
    }

    #[test]
    fn rigid_mode_keeps_unit_scale() {
        let src = points();
        let dst: Vec<Vec3> = src.iter().map(|p| p * 2.0).collect();
        assert_eq!(umeyama(&src, &dst, false).unwrap().scale, 1.0);
    }

    #[test]
    fn reflection_is_avoided() {
        let src = points();
        let dst: Vec<Vec3> = src.iter().map(|p| Vec3::new(-p.x, p.y, p.z)).collect();
        let est = umeyama(&src, &dst, true).unwrap();
        assert!((est.rotation.matrix().determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pose_alignment_handles_straight_paths() {
        let truth = Similarity {
            rotation: rodrigues(&Vec3::new(0.3, -0.5, 1.1)),
            translation: Vec3::new(1.0, -2.0, 0.5),
            scale: 0.7,
        };
        let gt: Vec<Pose> = (0..30)
            .map(|i| Pose::new(rodrigues(&Vec3::new(0.0, 0.01 * i as f64, 0.0)), Vec3::new(0.0, 0.0, i as f64)))
            .collect();
        let est: Vec<Pose> = gt
            .iter()
            .map(|p| {
                let inv = Similarity {
                    rotation: truth.rotation.transpose(),
                    translation: -(truth.rotation.transpose() * truth.translation) / truth.scale,
                    scale: 1.0 / truth.scale,
                };
                inv.apply_pose(p)
            })
            .collect();
        let a = pose_alignment(&est, &gt, true).unwrap();
        assert!(a.rotation.angle_to(&truth.rotation) < 1e-12);
        assert!((a.scale - truth.scale).abs() < 1e-12);
        assert!((a.translation - truth.translation).norm() < 1e-11);
    }

    #[test]
    fn degenerate_inputs() {
        let p = vec![Vec3::zeros(); 3];
        assert_eq!(umeyama(&p, &p, true), Err(AlignError::Degenerate));
        assert!(matches!(umeyama(&p[..1], &p[..1], true), Err(AlignError::TooFew { .. })));
    }
}
