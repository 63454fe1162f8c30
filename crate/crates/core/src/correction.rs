//! Closed-form rectification of relative poses distorted by a focal-length
//! scaling error `S = diag(s_x, s_y, 1)`, and re-chaining of the corrected
//! steps into trajectories.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{rodrigues, se3_interpolate, skew, vee, Intrinsics, Mat3, Pose, Rotation, Vec3};

/// Inter-frame rotation above which the general translation model is used.
pub const ROTATION_SWITCH: f64 = 5.0 * std::f64::consts::PI / 180.0;
/// Steps shorter than this skip the rotation correction.
pub const MIN_TRANSLATION: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum CorrectionError {
    #[error("scaling ratios must be positive (s_x = {sx}, s_y = {sy})")]
    NonPositiveScale { sx: f64, sy: f64 },
    #[error("timestamp {0} outside the reference trajectory span")]
    OutsideSpan(f64),
    #[error("reference trajectory has no timestamps")]
    MissingTimestamp,
}

/// Focal-length scaling error between an estimated and a reference camera.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingError {
    pub sx: f64,
    pub sy: f64,
}

impl Default for ScalingError {
    fn default() -> Self {
        Self::identity()
    }
}

impl ScalingError {
    pub fn identity() -> Self {
        ScalingError { sx: 1.0, sy: 1.0 }
    }

    pub fn new(sx: f64, sy: f64) -> Result<Self, CorrectionError> {
        if !(sx > 0.0 && sy > 0.0) {
            return Err(CorrectionError::NonPositiveScale { sx, sy });
        }
        Ok(ScalingError { sx, sy })
    }

    pub fn matrix(&self) -> Mat3 {
        Mat3::from_diagonal(&Vec3::new(self.sx, self.sy, 1.0))
    }

    /// `Δ = S − I`.
    pub fn delta(&self) -> Mat3 {
        Mat3::from_diagonal(&Vec3::new(self.sx - 1.0, self.sy - 1.0, 0.0))
    }

    /// Scaling whose deviation is `λΔ`.
    pub fn damped(&self, lambda: f64) -> ScalingError {
        ScalingError {
            sx: 1.0 + lambda * (self.sx - 1.0),
            sy: 1.0 + lambda * (self.sy - 1.0),
        }
    }

    /// Elementwise mean of the two diagonals.
    pub fn mean(&self, other: &ScalingError) -> ScalingError {
        ScalingError {
            sx: 0.5 * (self.sx + other.sx),
            sy: 0.5 * (self.sy + other.sy),
        }
    }

    /// `max(|s_x − 1|, |s_y − 1|)`.
    pub fn magnitude(&self) -> f64 {
        (self.sx - 1.0).abs().max((self.sy - 1.0).abs())
    }

    pub fn is_identity(&self) -> bool {
        self.sx == 1.0 && self.sy == 1.0
    }
}

/// `S = K_est K_global⁻¹` restricted to its diagonal.
///
/// Principal points are taken as shared; any difference is ignored here and
/// reported by [`principal_point_offset`].
pub fn scaling_from_intrinsics(
    k_est: &Intrinsics,
    k_global: &Intrinsics,
) -> Result<ScalingError, CorrectionError> {
    ScalingError::new(k_est.fx / k_global.fx, k_est.fy / k_global.fy)
}

/// Pixel distance between the two principal points.
pub fn principal_point_offset(k_est: &Intrinsics, k_global: &Intrinsics) -> f64 {
    (k_est.cx - k_global.cx).hypot(k_est.cy - k_global.cy)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TranslationBranch {
    Simplified,
    General,
}

/// Linear map `G` with `t = G t_est`.
///
/// Below [`ROTATION_SWITCH`] this is `S`. Otherwise it extracts the vector of
/// the antisymmetric part of `M = S⁻¹ [t_est]× R S⁻¹ Rᵀ` and rescales by
/// `s_x s_y`; both agree exactly when `R = I`.
pub fn translation_map(r: &Rotation, s: &ScalingError) -> (Mat3, TranslationBranch) {
    if r.angle() < ROTATION_SWITCH {
        return (s.matrix(), TranslationBranch::Simplified);
    }
    let s_inv = Mat3::from_diagonal(&Vec3::new(1.0 / s.sx, 1.0 / s.sy, 1.0));
    let right = r.matrix() * s_inv * r.matrix().transpose();
    let mut g = Mat3::zeros();
    for (i, e) in [Vec3::x(), Vec3::y(), Vec3::z()].iter().enumerate() {
        let m = s_inv * skew(e) * right;
        let col = vee(&(0.5 * (m - m.transpose()))) * (s.sx * s.sy);
        g.set_column(i, &col);
    }
    (g, TranslationBranch::General)
}

pub fn correct_translation(t_est: &Vec3, s: &ScalingError, r_est: &Rotation) -> Vec3 {
    translation_map(r_est, s).0 * t_est
}

/// Rotation error vector `Θ = [t]× ((R Δ Rᵀ − Δ) t) / ‖t‖²`, orthogonal to `t`
/// by construction. `None` when `‖t‖ ≤` [`MIN_TRANSLATION`].
pub fn rotation_error(r: &Rotation, t: &Vec3, s: &ScalingError) -> Option<Vec3> {
    let n2 = t.norm_squared();
    if n2 <= MIN_TRANSLATION * MIN_TRANSLATION {
        return None;
    }
    let delta = s.delta();
    let rm = r.matrix();
    let d = rm * delta * rm.transpose() - delta;
    Some(t.cross(&(d * t)) / n2)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotationCorrection {
    pub rotation: Rotation,
    pub theta: Vec3,
    /// Set when the step was too short to correct.
    pub skipped: bool,
}

/// `R = Rodrigues(Θ)ᵀ R_est`.
pub fn correct_rotation(r_est: &Rotation, t_est: &Vec3, s: &ScalingError) -> RotationCorrection {
    match rotation_error(r_est, t_est, s) {
        Some(theta) => RotationCorrection {
            rotation: rodrigues(&theta).transpose() * *r_est,
            theta,
            skipped: false,
        },
        None => RotationCorrection {
            rotation: *r_est,
            theta: Vec3::zeros(),
            skipped: true,
        },
    }
}

/// Which halves of the correction to apply.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectionOptions {
    pub rotation: bool,
    pub translation: bool,
}

impl Default for CorrectionOptions {
    fn default() -> Self {
        CorrectionOptions {
            rotation: true,
            translation: true,
        }
    }
}

impl CorrectionOptions {
    pub fn none() -> Self {
        CorrectionOptions {
            rotation: false,
            translation: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorrectedStep {
    pub original: Pose,
    pub corrected: Pose,
    pub theta: Vec3,
    pub branch: TranslationBranch,
    pub rotation_skipped: bool,
}

/// Corrects one relative pose `(R_est, t_est)`.
pub fn correct_step(step: &Pose, s: &ScalingError, opts: CorrectionOptions) -> CorrectedStep {
    let (g, branch) = translation_map(&step.rotation, s);
    let translation = if opts.translation {
        g * step.translation
    } else {
        step.translation
    };
    let rc = if opts.rotation {
        correct_rotation(&step.rotation, &step.translation, s)
    } else {
        RotationCorrection {
            rotation: step.rotation,
            theta: Vec3::zeros(),
            skipped: true,
        }
    };
    CorrectedStep {
        original: *step,
        corrected: Pose {
            rotation: rc.rotation,
            translation,
            timestamp: step.timestamp,
        },
        theta: rc.theta,
        branch,
        rotation_skipped: rc.skipped,
    }
}

/// Applies the inverse of the correction model to a true relative pose.
///
/// Translation: `t_est = G(R, S)⁻¹ t`. Rotation: `R_est = Rodrigues(Θ) R` with
/// `Θ` evaluated at the true rotation. Correcting the result recovers the
/// input up to second order in `‖Δ‖`.
pub fn corrupt_step(step: &Pose, s: &ScalingError) -> Pose {
    if s.is_identity() {
        return *step;
    }
    let (g, _) = translation_map(&step.rotation, s);
    let t_est = g.try_inverse().expect("scaling map is invertible") * step.translation;
    let rotation = match rotation_error(&step.rotation, &t_est, s) {
        Some(theta) => rodrigues(&theta) * step.rotation,
        None => step.rotation,
    };
    Pose {
        rotation,
        translation: t_est,
        timestamp: step.timestamp,
    }
}

/// One per-step record of a chain rectification.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainStepLog {
    pub index: usize,
    pub theta_norm: f64,
    pub branch: TranslationBranch,
    pub rotation_skipped: bool,
    pub lambda: f64,
}

/// Corrects each raw relative step `T_{i−1,i}` with `λΔ` and composes them
/// left to right from `first`.
///
/// Every step carries the intrinsics estimated for it; the result has
/// `steps.len() + 1` poses.
pub fn rectify_primary_chain(
    first: Pose,
    steps: &[(Pose, Intrinsics)],
    k_global: &Intrinsics,
    lambda: f64,
    opts: CorrectionOptions,
) -> Result<(Vec<Pose>, Vec<ChainStepLog>), CorrectionError> {
    let mut poses = Vec::with_capacity(steps.len() + 1);
    let mut log = Vec::with_capacity(steps.len());
    poses.push(first);
    let mut current = first;
    for (i, (step, k_est)) in steps.iter().enumerate() {
        let s = scaling_from_intrinsics(k_est, k_global)?.damped(lambda);
        let c = correct_step(step, &s, opts);
        current = current * c.corrected;
        poses.push(current);
        log.push(ChainStepLog {
            index: i + 1,
            theta_norm: c.theta.norm(),
            branch: c.branch,
            rotation_skipped: c.rotation_skipped,
            lambda,
        });
    }
    Ok((poses, log))
}

/// Pose at time `t` on a timestamped trajectory sorted by time.
///
/// Exact timestamp matches are returned unchanged; otherwise the bracketing
/// poses are interpolated.
pub fn reference_pose(trajectory: &[Pose], t: f64) -> Result<Pose, CorrectionError> {
    let stamps: Vec<f64> = trajectory
        .iter()
        .map(|p| p.timestamp.ok_or(CorrectionError::MissingTimestamp))
        .collect::<Result<_, _>>()?;
    let first = *stamps.first().ok_or(CorrectionError::OutsideSpan(t))?;
    let last = *stamps.last().expect("non-empty");
    if !(t >= first && t <= last) {
        return Err(CorrectionError::OutsideSpan(t));
    }
    let hi = stamps.partition_point(|&s| s < t);
    if stamps[hi] == t {
        return Ok(trajectory[hi]);
    }
    let lo = hi - 1;
    let alpha = (t - stamps[lo]) / (stamps[hi] - stamps[lo]);
    let p = se3_interpolate(&trajectory[lo], &trajectory[hi], alpha)
        .expect("alpha within the bracket");
    Ok(p.with_timestamp(t))
}

/// Like [`reference_pose`], but falls back to the nearest endpoint when `t`
/// lies outside the trajectory's time span.
pub fn reference_pose_or_nearest(trajectory: &[Pose], t: f64) -> Result<Pose, CorrectionError> {
    match reference_pose(trajectory, t) {
        Err(CorrectionError::OutsideSpan(_)) if !trajectory.is_empty() => {
            let first = trajectory[0];
            let last = trajectory[trajectory.len() - 1];
            let before = first.timestamp.is_some_and(|s| t < s);
            Ok(if before { first } else { last })
        }
        r => r,
    }
}

/// Re-derives each assistant pose from its (possibly interpolated) primary
/// reference.
///
/// The raw offset `ref_raw⁻¹ · A_raw` is corrected with `S_joint` (damped by
/// `λ`) and re-attached to the rectified reference.
pub fn rectify_assistant_chain(
    primary_raw: &[Pose],
    primary_rectified: &[Pose],
    assistant_raw: &[Pose],
    s_joint: &ScalingError,
    lambda: f64,
    opts: CorrectionOptions,
) -> Vec<Result<Pose, CorrectionError>> {
    let s = s_joint.damped(lambda);
    assistant_raw
        .iter()
        .map(|a| {
            let t = a.timestamp.ok_or(CorrectionError::MissingTimestamp)?;
            let ref_raw = reference_pose_or_nearest(primary_raw, t)?;
            let ref_rect = reference_pose_or_nearest(primary_rectified, t)?;
            let rel = ref_raw.inverse() * *a;
            let c = correct_step(&rel, &s, opts);
            Ok((ref_rect * c.corrected).with_timestamp(t))
        })
        .collect()
}

/// Writes the per-step correction log as CSV.
pub fn write_correction_log<W: Write>(mut w: W, rows: &[(usize, ChainStepLog)]) -> std::io::Result<()> {
    writeln!(w, "submap,step,theta_norm,branch,rotation_skipped,lambda")?;
    for (submap, r) in rows {
        let branch = match r.branch {
            TranslationBranch::Simplified => "simplified",
            TranslationBranch::General => "general",
        };
        writeln!(
            w,
            "{},{},{:.9e},{},{},{}",
            submap, r.index, r.theta_norm, branch, r.rotation_skipped, r.lambda
        )?;
    }
    Ok(())
}
