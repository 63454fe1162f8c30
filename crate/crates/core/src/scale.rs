//! Per-sub-map scale rectification from the constant rig spacing, and rigid
//! placement of each sub-map in the world frame.

use serde::{Deserialize, Serialize};

use crate::geometry::{se3_interpolate, Pose};
use crate::submap::Submap;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ScaleError {
    #[error("assistant time {t} outside primary bracket [{t0}, {t1}]")]
    OutsideBracket { t: f64, t0: f64, t1: f64 },
    #[error("pose without timestamp")]
    MissingTimestamp,
    #[error("sub-map {0} has no valid primary/assistant pair")]
    NoValidPairs(usize),
    #[error("non-positive reference spacing {0}")]
    NonPositiveReference(f64),
    #[error("sub-map {0} has no common frame")]
    NoCommonFrame(usize),
}

/// Spacing statistics of one sub-map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpacingEstimate {
    pub submap: usize,
    /// Per-pair spacings `d_{i,k}`.
    pub spacings: Vec<f64>,
    /// `d̄_k`.
    pub mean: f64,
}

impl SpacingEstimate {
    /// `s_k = d̄_1 / d̄_k`.
    pub fn scale_against(&self, reference: f64) -> f64 {
        reference / self.mean
    }
}

/// Distance between the optical centers of two poses in the same frame.
pub fn pair_spacing(primary: &Pose, assistant: &Pose) -> f64 {
    (primary.translation - assistant.translation).norm()
}

/// Spacing between an assistant pose and the primary pose interpolated at
/// its timestamp from the bracket `(lo, hi)`.
pub fn async_pair_spacing(assistant: &Pose, lo: &Pose, hi: &Pose) -> Result<f64, ScaleError> {
    let t = assistant.timestamp.ok_or(ScaleError::MissingTimestamp)?;
    let t0 = lo.timestamp.ok_or(ScaleError::MissingTimestamp)?;
    let t1 = hi.timestamp.ok_or(ScaleError::MissingTimestamp)?;
    if !(t >= t0 && t <= t1) {
        return Err(ScaleError::OutsideBracket { t, t0, t1 });
    }
    let alpha = if t1 > t0 { (t - t0) / (t1 - t0) } else { 0.0 };
    let p = se3_interpolate(lo, hi, alpha).map_err(|_| ScaleError::OutsideBracket { t, t0, t1 })?;
    Ok(pair_spacing(&p, assistant))
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Twice the median sampling period of a time-sorted trajectory.
pub fn max_bracket(trajectory: &[Pose]) -> Option<f64> {
    let stamps: Vec<f64> = trajectory.iter().map(|p| p.timestamp.unwrap_or(f64::NAN)).collect();
    median(stamps.windows(2).map(|w| w[1] - w[0]).collect()).map(|m| 2.0 * m)
}

/// Pose of a time-sorted trajectory at `t`, with the indices of the
/// bracketing samples.
///
/// Exact timestamp matches return the sample itself with `lo == hi`. Times
/// outside the span, or brackets longer than `max_bracket`, give `None`.
pub fn bracketed_pose(trajectory: &[Pose], t: f64, max_bracket: Option<f64>) -> Option<(Pose, usize, usize)> {
    let stamps: Vec<f64> = trajectory.iter().map(|p| p.timestamp.unwrap_or(f64::NAN)).collect();
    let hi = stamps.partition_point(|&x| x < t);
    if hi < stamps.len() && stamps[hi] == t {
        return Some((trajectory[hi], hi, hi));
    }
    if hi == 0 || hi == stamps.len() {
        return None;
    }
    let lo = hi - 1;
    if max_bracket.is_some_and(|m| stamps[hi] - stamps[lo] > m * (1.0 + 1e-12)) {
        return None;
    }
    let alpha = (t - stamps[lo]) / (stamps[hi] - stamps[lo]);
    let p = se3_interpolate(&trajectory[lo], &trajectory[hi], alpha).ok()?;
    Some((p.with_timestamp(t), lo, hi))
}

fn sorted_assistant(s: &Submap) -> Vec<Pose> {
    let mut a = s.assistant_poses();
    a.sort_by(|x, y| x.timestamp.unwrap_or(f64::NAN).total_cmp(&y.timestamp.unwrap_or(f64::NAN)));
    a
}

/// Spacings of every usable primary/assistant pair of a sub-map.
///
/// An assistant frame whose timestamp equals a primary timestamp is paired
/// directly. Otherwise both directions are used: the primary trajectory is
/// interpolated at each assistant timestamp, and the assistant trajectory at
/// each primary timestamp. Over a shared bracket the two interpolation
/// parameters are `α` and `1 − α`, so the chord bias of linear translation
/// interpolation on curved paths cancels to first order in the mean.
/// Brackets longer than twice the median period are skipped, as are times
/// outside the other trajectory's span.
pub fn submap_spacings(s: &Submap) -> Vec<f64> {
    let primary = s.primary_poses();
    let assistant = sorted_assistant(s);
    let (p_max, a_max) = (max_bracket(&primary), max_bracket(&assistant));
    let mut out = Vec::new();
    for a in &assistant {
        let Some(t) = a.timestamp else { continue };
        if let Some((p, _, _)) = bracketed_pose(&primary, t, p_max) {
            out.push(pair_spacing(&p, a));
        }
    }
    let a_stamps: Vec<f64> = assistant.iter().map(|a| a.timestamp.unwrap_or(f64::NAN)).collect();
    for p in &primary {
        let Some(t) = p.timestamp else { continue };
        if a_stamps.contains(&t) {
            continue;
        }
        if let Some((a, _, _)) = bracketed_pose(&assistant, t, a_max) {
            out.push(pair_spacing(p, &a));
        }
    }
    out
}

/// `d̄_k` of a sub-map, or an error when it has no usable pair.
pub fn measure_spacing(s: &Submap) -> Result<SpacingEstimate, ScaleError> {
    let spacings: Vec<f64> = submap_spacings(s).into_iter().filter(|d| *d > 0.0).collect();
    if spacings.is_empty() {
        return Err(ScaleError::NoValidPairs(s.id));
    }
    let mean = spacings.iter().sum::<f64>() / spacings.len() as f64;
    Ok(SpacingEstimate {
        submap: s.id,
        spacings,
        mean,
    })
}

/// Multiplies every local translation and depth value by `s`; rotations and
/// confidences are untouched.
pub fn apply_scale(s: &mut Submap, factor: f64) {
    let scale = |p: &mut Pose| p.translation *= factor;
    for f in s.primary.iter_mut().chain(s.assistant.iter_mut()).chain(s.loop_frame.iter_mut()) {
        scale(&mut f.pose);
        if let Some(g) = f.depth.as_mut() {
            g.scale_depth(factor);
        }
    }
    s.scale *= factor;
}

/// Outcome of rectifying one sub-map.
#[derive(Clone, Debug, PartialEq)]
pub struct Rectification {
    pub scale: f64,
    pub estimate: Option<SpacingEstimate>,
}

/// Scales a sub-map so that its mean spacing equals `reference` (`d̄_1`).
///
/// A sub-map without valid pairs is flagged degenerate and scaled by
/// `fallback` (the previous sub-map's factor).
pub fn rectify_submap(s: &mut Submap, reference: f64, fallback: f64) -> Result<Rectification, ScaleError> {
    if !(reference > 0.0) {
        return Err(ScaleError::NonPositiveReference(reference));
    }
    match measure_spacing(s) {
        Ok(est) => {
            let k = est.scale_against(reference);
            apply_scale(s, k);
            s.degenerate = false;
            Ok(Rectification {
                scale: k,
                estimate: Some(est),
            })
        }
        Err(ScaleError::NoValidPairs(_)) => {
            apply_scale(s, fallback);
            s.degenerate = true;
            Ok(Rectification {
                scale: fallback,
                estimate: None,
            })
        }
        Err(e) => Err(e),
    }
}

/// `T_{k→w} = T_{w,f} · T_{k,f}⁻¹`.
pub fn align_submap_to_world(local_f: &Pose, world_f: &Pose) -> Pose {
    (*world_f * local_f.inverse()).without_timestamp()
}

/// Lowest-id common frame of a sub-map.
pub fn first_common_frame(s: &Submap) -> Option<usize> {
    s.common.iter().copied().min()
}

/// Places sub-map `s` using the world pose of its first common frame as held
/// by `previous`. The first sub-map (no common frames) gets the identity.
pub fn chain_to_world(s: &mut Submap, previous: Option<&Submap>) -> Result<(), ScaleError> {
    let Some(f) = first_common_frame(s) else {
        s.to_world = Pose::identity();
        return Ok(());
    };
    let prev = previous.ok_or(ScaleError::NoCommonFrame(s.id))?;
    let world_f = prev.world_pose(f).ok_or(ScaleError::NoCommonFrame(s.id))?;
    let local_f = s.local_pose(f).ok_or(ScaleError::NoCommonFrame(s.id))?;
    s.to_world = align_submap_to_world(&local_f, &world_f);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Intrinsics, Rotation, Vec3};
    use crate::simulator::{DistortionConfig, TrajectoryKind, World, WorldConfig};
    use crate::submap::{FrameEstimate, SubmapPlan};

    fn at(x: f64, y: f64, z: f64, t: f64) -> Pose {
        Pose::from_translation(Vec3::new(x, y, z)).with_timestamp(t)
    }

    #[test]
    fn spacing_examples() {
        assert_eq!(pair_spacing(&Pose::identity(), &Pose::identity()), 0.0);
        assert_eq!(pair_spacing(&at(0.0, 0.0, 0.0, 0.0), &at(0.5, 0.0, 0.0, 0.0)), 0.5);
        assert_eq!(pair_spacing(&at(1.0, 2.0, 3.0, 0.0), &at(4.0, 6.0, 3.0, 0.0)), 5.0);
    }

    #[test]
    fn async_spacing_on_linear_motion() {
        let lo = at(0.0, 0.0, 0.0, 0.0);
        let hi = at(0.0, 0.0, 2.0, 1.0);
        let a = at(0.5, 0.0, 1.0, 0.5);
        assert!((async_pair_spacing(&a, &lo, &hi).unwrap() - 0.5).abs() < 1e-9);
        let exact = at(0.5, 0.0, 0.0, 0.0);
        assert_eq!(
            async_pair_spacing(&exact, &lo, &hi).unwrap(),
            pair_spacing(&lo, &exact)
        );
        assert!(matches!(
            async_pair_spacing(&at(0.0, 0.0, 0.0, 1.5), &lo, &hi),
            Err(ScaleError::OutsideBracket { .. })
        ));
    }

    fn toy_submap(spacing: f64) -> Submap {
        let k = Intrinsics::new(500.0, 500.0, 320.0, 240.0).unwrap();
        let frames = |dx: f64| -> Vec<FrameEstimate> {
            (0..4)
                .map(|i| FrameEstimate {
                    frame: i,
                    pose: at(dx, 0.0, i as f64, i as f64 * 0.1),
                    depth: None,
                })
                .collect()
        };
        Submap {
            id: 1,
            common: vec![],
            keyframes: vec![0, 1, 2, 3],
            primary: frames(0.0),
            assistant: frames(spacing),
            loop_closure: None,
            loop_frame: None,
            intrinsics: k,
            assistant_intrinsics: k,
            scale: 1.0,
            to_world: Pose::identity(),
            degenerate: false,
        }
    }

    #[test]
    fn rectification_restores_reference_spacing() {
        let mut s = toy_submap(1.0);
        let r = rectify_submap(&mut s, 0.5, 1.0).unwrap();
        assert_eq!(r.scale, 0.5);
        for d in submap_spacings(&s) {
            assert!((d - 0.5).abs() < 1e-12);
        }
        let mut same = toy_submap(0.5);
        let before = same.clone();
        rectify_submap(&mut same, 0.5, 1.0).unwrap();
        assert_eq!(same.primary, before.primary);
    }

    #[test]
    fn rotations_are_bit_identical_after_scaling() {
        let mut s = toy_submap(1.0);
        s.primary[2].pose.rotation = Rotation::exp(&Vec3::new(0.1, 0.2, 0.3));
        let r = s.primary[2].pose.rotation;
        apply_scale(&mut s, 0.37);
        assert_eq!(s.primary[2].pose.rotation, r);
    }

    #[test]
    fn degenerate_submap_reuses_previous_factor() {
        let mut s = toy_submap(0.0);
        let r = rectify_submap(&mut s, 0.5, 1.7).unwrap();
        assert!(s.degenerate);
        assert_eq!(r.scale, 1.7);
        assert!(r.estimate.is_none());
    }

    #[test]
    fn long_brackets_are_filtered() {
        let mut s = toy_submap(0.5);
        // Primary stamps 0, 0.1, 0.2, 1.0: the last bracket is 8x the median period.
        s.primary[3].pose.timestamp = Some(1.0);
        for a in s.assistant.iter_mut() {
            a.pose.timestamp = Some(a.pose.timestamp.unwrap() + 0.05);
        }
        // Two assistant frames land in short primary brackets, and primary
        // frames 1 and 2 in short assistant brackets.
        assert_eq!(submap_spacings(&s).len(), 4);
    }

    #[test]
    fn two_way_async_spacing_cancels_chord_bias() {
        let w = World::generate(&WorldConfig {
            kind: TrajectoryKind::Loop,
            frames: 80,
            landmarks_per_frame: 4,
            assistant_offset: 0.05,
            ..WorldConfig::default()
        })
        .unwrap();
        let ids: Vec<usize> = (0..40).step_by(3).collect();
        let plan = SubmapPlan {
            id: 0,
            common: vec![],
            assistant: ids.clone(),
            keyframes: ids,
            loop_closure: None,
        };
        let s = w.synthesize_submap(&plan, &DistortionConfig::none()).unwrap();
        let truth = w.config.spacing();
        let primary = s.primary_poses();
        let one_way: Vec<f64> = sorted_assistant(&s)
            .iter()
            .filter_map(|a| bracketed_pose(&primary, a.timestamp?, max_bracket(&primary)).map(|(p, _, _)| pair_spacing(&p, a)))
            .collect();
        let one_way = one_way.iter().sum::<f64>() / one_way.len() as f64;
        let two_way = measure_spacing(&s).unwrap().mean;
        assert!((one_way - truth).abs() > 1e-4, "{one_way}");
        assert!((two_way - truth).abs() < 0.1 * (one_way - truth).abs(), "{two_way} vs {one_way}");
    }

    #[test]
    fn first_submap_aligns_to_identity() {
        let mut s = toy_submap(0.5);
        chain_to_world(&mut s, None).unwrap();
        assert_eq!(s.to_world, Pose::identity());
    }

    #[test]
    fn recovers_simulated_multiplier() {
        let w = World::generate(&WorldConfig {
            frames: 60,
            landmarks_per_frame: 4,
            ..WorldConfig::default()
        })
        .unwrap();
        let plan = |id: usize, ids: Vec<usize>| SubmapPlan {
            id,
            common: vec![],
            assistant: ids.clone(),
            keyframes: ids,
            loop_closure: None,
        };
        let cfg = DistortionConfig {
            scale_multipliers: vec![1.0, 2.0],
            ..DistortionConfig::none()
        };
        let a = w.synthesize_submap(&plan(0, vec![0, 4, 8]), &cfg).unwrap();
        let mut b = w.synthesize_submap(&plan(1, vec![10, 14, 18]), &cfg).unwrap();
        let d1 = measure_spacing(&a).unwrap().mean;
        let r = rectify_submap(&mut b, d1, 1.0).unwrap();
        assert!((r.scale - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_noise_chain_reproduces_truth_up_to_similarity() {
        let w = World::generate(&WorldConfig {
            kind: TrajectoryKind::Arc,
            frames: 120,
            landmarks_per_frame: 4,
            ..WorldConfig::default()
        })
        .unwrap();
        let cfg = DistortionConfig {
            scale_log_sigma: 0.3,
            ..DistortionConfig::none()
        };
        let batches: Vec<Vec<usize>> = (0..5).map(|k| (k * 20..k * 20 + 20).step_by(4).collect()).collect();
        let mut plans: Vec<SubmapPlan> = Vec::new();
        for (k, kf) in batches.into_iter().enumerate() {
            let common = plans
                .last()
                .map(|p| {
                    let ids = p.primary_ids();
                    ids[ids.len() - 3..].to_vec()
                })
                .unwrap_or_default();
            let assistant = common.iter().chain(&kf).copied().collect();
            plans.push(SubmapPlan {
                id: k,
                common,
                keyframes: kf,
                assistant,
                loop_closure: None,
            });
        }
        let mut maps: Vec<Submap> = plans.iter().map(|p| w.synthesize_submap(p, &cfg).unwrap()).collect();
        let d1 = measure_spacing(&maps[0]).unwrap().mean;
        for k in 0..maps.len() {
            rectify_submap(&mut maps[k], d1, 1.0).unwrap();
            let (done, rest) = maps.split_at_mut(k);
            chain_to_world(&mut rest[0], done.last()).unwrap();
        }
        let m1 = w.distortion_for(0, &cfg).multiplier;
        let origin = w.primary_pose(0).inverse();
        for s in &maps {
            for f in &s.keyframes {
                let est = s.world_pose(*f).unwrap();
                let truth = (origin * w.primary_pose(*f)).scaled_translation(m1);
                assert!((est.translation - truth.translation).norm() < 1e-9);
                assert!(est.rotation.angle_to(&truth.rotation) < 1e-9);
            }
        }
    }
}
