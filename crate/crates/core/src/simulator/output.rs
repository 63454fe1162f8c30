use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::correction::{corrupt_step, reference_pose_or_nearest, ScalingError};
use crate::geometry::{se3_exp, Intrinsics, Pose, Vec3, Vec6};
use crate::submap::{DepthGrid, FrameEstimate, Submap, SubmapPlan};

use super::world::World;
use super::SimulatorError;

const WARP_RHO_MAX: f64 = 1.5;
const WARP_ITERATIONS: usize = 30;

/// How the simulated reconstructor corrupts each sub-map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistortionConfig {
    /// Standard deviation of `ln m` for the per-sub-map scale multiplier `m`.
    pub scale_log_sigma: f64,
    /// Explicit multipliers by sub-map id; overrides the random draw where present.
    pub scale_multipliers: Vec<f64>,
    /// Focal errors are drawn uniformly from `[1 − e, 1 + e]` per axis.
    pub intrinsic_error: f64,
    /// Explicit primary `(s_x, s_y)` by sub-map id.
    pub intrinsic_scales: Vec<[f64; 2]>,
    /// Explicit assistant `(s_x, s_y)` by sub-map id.
    pub assistant_intrinsic_scales: Vec<[f64; 2]>,
    /// Radial depth warp `1 + a ρ² + b ρ⁴`.
    pub warp_a: f64,
    pub warp_b: f64,
    /// Per-step pose noise (radians, units).
    pub rotation_noise: f64,
    pub translation_noise: f64,
}

impl Default for DistortionConfig {
    fn default() -> Self {
        DistortionConfig {
            scale_log_sigma: 0.3,
            scale_multipliers: Vec::new(),
            intrinsic_error: 0.05,
            intrinsic_scales: Vec::new(),
            assistant_intrinsic_scales: Vec::new(),
            warp_a: 0.0,
            warp_b: 0.0,
            rotation_noise: 0.0,
            translation_noise: 0.0,
        }
    }
}

impl DistortionConfig {
    /// Exact reconstructions: no scale drift, intrinsics, warp or noise.
    pub fn none() -> Self {
        DistortionConfig {
            scale_log_sigma: 0.0,
            intrinsic_error: 0.0,
            ..DistortionConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), SimulatorError> {
        let bad = |m: &str| Err(SimulatorError::InvalidConfig(m.to_string()));
        if !(self.scale_log_sigma >= 0.0 && self.rotation_noise >= 0.0 && self.translation_noise >= 0.0) {
            return bad("noise levels must be non-negative");
        }
        if !(0.0..0.5).contains(&self.intrinsic_error) {
            return bad("intrinsic error must be in [0, 0.5)");
        }
        if self.scale_multipliers.iter().any(|m| !(*m > 0.0)) {
            return bad("scale multipliers must be positive");
        }
        let scales = self.intrinsic_scales.iter().chain(&self.assistant_intrinsic_scales);
        if scales.flatten().any(|s| !(*s > 0.0)) {
            return bad("intrinsic scales must be positive");
        }
        Ok(())
    }

    pub fn has_warp(&self) -> bool {
        self.warp_a != 0.0 || self.warp_b != 0.0
    }
}

/// The hidden per-sub-map errors applied by the simulator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SubmapDistortion {
    pub multiplier: f64,
    pub primary: ScalingError,
    pub assistant: ScalingError,
}

impl SubmapDistortion {
    /// Scaling error shared by a primary/assistant relative pose.
    pub fn joint(&self) -> ScalingError {
        self.primary.mean(&self.assistant)
    }
}

fn submap_rng(seed: u64, id: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + id as u64);
    rng
}

impl World {
    /// Draws the distortion of sub-map `id`; explicit lists take precedence.
    pub fn distortion_for(&self, id: usize, cfg: &DistortionConfig) -> SubmapDistortion {
        let mut rng = submap_rng(self.config.seed, id);
        let z: f64 = Normal::new(0.0, 1.0).expect("unit normal").sample(&mut rng);
        let e = cfg.intrinsic_error;
        let mut draw = || {
            if e > 0.0 {
                Uniform::new_inclusive(1.0 - e, 1.0 + e).expect("valid range").sample(&mut rng)
            } else {
                1.0
            }
        };
        let p = [draw(), draw()];
        let a = [draw(), draw()];
        let multiplier = cfg
            .scale_multipliers
            .get(id)
            .copied()
            .unwrap_or((cfg.scale_log_sigma * z).exp());
        let p = cfg.intrinsic_scales.get(id).copied().unwrap_or(p);
        let a = cfg.assistant_intrinsic_scales.get(id).copied().unwrap_or(a);
        SubmapDistortion {
            multiplier,
            primary: ScalingError { sx: p[0], sy: p[1] },
            assistant: ScalingError { sx: a[0], sy: a[1] },
        }
    }

    /// Produces what the reconstructor would report for one planned sub-map.
    ///
    /// Local truth is taken relative to the first primary frame and scaled by
    /// the sub-map multiplier. Primary steps are corrupted with `S_p`;
    /// assistant offsets to their primary reference with the joint error.
    pub fn synthesize_submap(
        &self,
        plan: &SubmapPlan,
        cfg: &DistortionConfig,
    ) -> Result<Submap, SimulatorError> {
        cfg.validate()?;
        let ids = plan.primary_ids();
        if ids.is_empty() {
            return Err(SimulatorError::InvalidConfig(format!("sub-map {} is empty", plan.id)));
        }
        if ids.len() != plan.assistant.len() {
            return Err(SimulatorError::InvalidConfig(format!(
                "sub-map {}: {} primary frames but {} assistant frames",
                plan.id,
                ids.len(),
                plan.assistant.len()
            )));
        }
        for &f in ids.iter().chain(&plan.assistant) {
            if f >= self.frames() {
                return Err(SimulatorError::UnknownFrame(f));
            }
        }
        let dist = self.distortion_for(plan.id, cfg);
        let m = dist.multiplier;
        let mut rng = submap_rng(self.config.seed ^ 0x9e37_79b9_7f4a_7c15, plan.id);
        let noise = PoseNoise::new(cfg);

        let anchor = self.primary_pose(ids[0]);
        let anchor_inv = anchor.inverse();
        let local = |world: &Pose| -> Pose {
            let mut p = (anchor_inv * *world).scaled_translation(m);
            p.timestamp = world.timestamp;
            p
        };

        let truth: Vec<Pose> = ids.iter().map(|&f| local(&self.primary_pose(f))).collect();
        let mut est = Vec::with_capacity(truth.len());
        est.push(truth[0]);
        for w in truth.windows(2) {
            let step = corrupt_step(&(w[0].inverse() * w[1]), &dist.primary);
            let step = noise.apply(&step, &mut rng);
            let mut next = *est.last().expect("non-empty") * step;
            next.timestamp = w[1].timestamp;
            est.push(next);
        }

        let warp = cfg.has_warp().then(|| {
            let r = self.primary_pose(ids[ids.len() / 2]);
            DepthWarp::new(self, r, cfg.warp_a, cfg.warp_b)
        });
        let depth_for = |world: &Pose| -> DepthGrid {
            let mut g = match &warp {
                Some(w) => w.render(self, world),
                None => self.render_depth(world),
            };
            g.scale_depth(m);
            g
        };

        let primary: Vec<FrameEstimate> = ids
            .iter()
            .zip(&est)
            .map(|(&f, p)| FrameEstimate {
                frame: f,
                pose: *p,
                depth: Some(depth_for(&self.primary_pose(f))),
            })
            .collect();

        let loop_frame = match plan.loop_closure {
            Some(lc) => {
                let ci = ids.iter().position(|&f| f == lc.current).ok_or_else(|| {
                    SimulatorError::InvalidConfig(format!(
                        "loop frame {} is not in sub-map {}",
                        lc.current, plan.id
                    ))
                })?;
                if lc.historical >= self.frames() {
                    return Err(SimulatorError::UnknownFrame(lc.historical));
                }
                let hist_world = self.primary_pose(lc.historical);
                let step = corrupt_step(&(truth[ci].inverse() * local(&hist_world)), &dist.primary);
                let step = noise.apply(&step, &mut rng);
                let mut pose = est[ci] * step;
                pose.timestamp = hist_world.timestamp;
                Some(FrameEstimate {
                    frame: lc.historical,
                    pose,
                    depth: Some(depth_for(&hist_world)),
                })
            }
            None => None,
        };

        let joint = dist.joint();
        let mut assistant_ids = plan.assistant.clone();
        assistant_ids.sort_by(|a, b| {
            self.timestamp(crate::submap::CameraRole::Assistant, *a)
                .total_cmp(&self.timestamp(crate::submap::CameraRole::Assistant, *b))
        });
        let mut assistant = Vec::with_capacity(assistant_ids.len());
        for &a in &assistant_ids {
            let a_world = self.assistant_pose(a);
            let t = a_world.timestamp.expect("stamped");
            let a_true = local(&a_world);
            let ref_true = reference_pose_or_nearest(&truth, t)
                .map_err(|e| SimulatorError::InvalidConfig(e.to_string()))?;
            let ref_est = reference_pose_or_nearest(&est, t)
                .map_err(|e| SimulatorError::InvalidConfig(e.to_string()))?;
            let rel = corrupt_step(&(ref_true.inverse() * a_true), &joint);
            let rel = noise.apply(&rel, &mut rng);
            assistant.push(FrameEstimate {
                frame: a,
                pose: (ref_est * rel).with_timestamp(t),
                depth: None,
            });
        }

        let k = self.config.intrinsics;
        Ok(Submap {
            id: plan.id,
            common: plan.common.clone(),
            keyframes: plan.keyframes.clone(),
            primary,
            assistant,
            loop_closure: plan.loop_closure,
            loop_frame,
            intrinsics: scaled_intrinsics(&k, &dist.primary),
            assistant_intrinsics: scaled_intrinsics(&k, &dist.assistant),
            scale: 1.0,
            to_world: Pose::identity(),
            degenerate: false,
        })
    }
}

fn scaled_intrinsics(k: &Intrinsics, s: &ScalingError) -> Intrinsics {
    k.scaled(s.sx, s.sy)
}

struct PoseNoise {
    rotation: Option<Normal<f64>>,
    translation: Option<Normal<f64>>,
}

impl PoseNoise {
    fn new(cfg: &DistortionConfig) -> Self {
        let n = |s: f64| (s > 0.0).then(|| Normal::new(0.0, s).expect("positive sigma"));
        PoseNoise {
            rotation: n(cfg.rotation_noise),
            translation: n(cfg.translation_noise),
        }
    }

    fn apply(&self, p: &Pose, rng: &mut ChaCha8Rng) -> Pose {
        if self.rotation.is_none() && self.translation.is_none() {
            return *p;
        }
        let mut xi = Vec6::zeros();
        if let Some(n) = &self.rotation {
            for i in 0..3 {
                xi[i] = n.sample(rng);
            }
        }
        if let Some(n) = &self.translation {
            for i in 3..6 {
                xi[i] = n.sample(rng);
            }
        }
        let mut out = *p * se3_exp(&xi);
        out.timestamp = p.timestamp;
        out
    }
}

/// Radial warp of the whole scene about a reference camera.
///
/// A world point `X` moves to `c + g(u) (X − c)` where `c` is the reference
/// optical center, `u` the viewing direction from it and
/// `g = 1 + a ρ² + b ρ⁴` with `ρ` the normalized image radius of `u` (held at
/// its maximum outside the reference view). Every frame of the sub-map
/// observes the same warped surface, so the resulting point clouds agree
/// with each other but not with the truth.
pub(crate) struct DepthWarp {
    reference: Pose,
    a: f64,
    b: f64,
    half_diagonal: f64,
    intrinsics: Intrinsics,
    candidates: Vec<u32>,
}

impl DepthWarp {
    pub(crate) fn new(world: &World, reference: Pose, a: f64, b: f64) -> Self {
        let cfg = &world.config;
        let half_diagonal = (cfg.image_width.powi(2) + cfg.image_height.powi(2)).sqrt() / 2.0;
        // Wide enough for any ray a frame in this sub-map casts.
        let reach = 2.5 * cfg.max_depth + cfg.step * 40.0;
        DepthWarp {
            reference,
            a,
            b,
            half_diagonal,
            intrinsics: cfg.intrinsics,
            candidates: world.building_candidates(&reference.translation.xy(), reach),
        }
    }

    fn gain(&self, dir_world: &Vec3) -> f64 {
        let d = self.reference.rotation.transpose() * *dir_world;
        let rho = if d.z > 0.0 {
            let x = self.intrinsics.fx * d.x / d.z;
            let y = self.intrinsics.fy * d.y / d.z;
            ((x * x + y * y).sqrt() / self.half_diagonal).min(WARP_RHO_MAX)
        } else {
            WARP_RHO_MAX
        };
        let r2 = rho * rho;
        1.0 + self.a * r2 + self.b * r2 * r2
    }

    /// Signed distance along the reference ray through `y` between `y` and
    /// the warped surface.
    fn residual(&self, world: &World, y: &Vec3) -> Option<f64> {
        let c = self.reference.translation;
        let v = y - c;
        let len = v.norm();
        if len < 1e-12 {
            return None;
        }
        let u = v / len;
        let hit = world.cast(&self.candidates, &c, &u)?;
        Some(len - self.gain(&u) * hit)
    }

    pub(crate) fn render(&self, world: &World, pose: &Pose) -> DepthGrid {
        let truth = world.render_depth(pose);
        let mut out = truth.clone();
        let k = world.config.intrinsics;
        let view = world.view_candidates(pose);
        for r in 0..truth.rows {
            for c in 0..truth.cols {
                let i = truth.index(r, c);
                if truth.confidence[i] <= 0.0 {
                    continue;
                }
                let dir = pose.rotation * k.ray(&truth.sample_pixel(r, c));
                let z0 = truth.depth[i];
                match self.solve(world, &view, pose, &dir, z0) {
                    Some(z) => out.set(r, c, z, truth.confidence[i]),
                    None => out.set(r, c, 0.0, 0.0),
                }
            }
        }
        out
    }

    /// Depth along `origin + z · dir` at which the ray meets the warped surface.
    fn solve(&self, world: &World, view: &[u32], pose: &Pose, dir: &Vec3, z0: f64) -> Option<f64> {
        let o = pose.translation;
        let f = |z: f64| self.residual(world, &(o + dir * z));
        let mut za = z0;
        let mut fa = f(za)?;
        let mut zb = z0 * self.gain(&(o + dir * z0 - self.reference.translation));
        if (zb - za).abs() < 1e-12 * z0 {
            zb = z0 * (1.0 + 1e-6);
        }
        let mut fb = f(zb)?;
        let mut converged = false;
        for _ in 0..WARP_ITERATIONS {
            if fb.abs() <= 1e-11 * zb.max(1.0) {
                converged = true;
                break;
            }
            let denom = fb - fa;
            if denom.abs() < 1e-300 {
                break;
            }
            let zn = zb - fb * (zb - za) / denom;
            if !(zn > 0.0) || !zn.is_finite() {
                return None;
            }
            za = zb;
            fa = fb;
            zb = zn;
            fb = f(zb)?;
        }
        if !converged {
            return None;
        }
        // The warped point must be the one this camera actually sees.
        let y = o + dir * zb;
        let c = self.reference.translation;
        let u = (y - c).normalize();
        let x = c + (y - c) / self.gain(&u);
        let to_x = x - o;
        let seen = world.cast(view, &o, &to_x)?;
        ((seen - 1.0).abs() < 1e-6).then_some(zb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correction::{correct_step, CorrectionOptions};
    use crate::simulator::{TrajectoryKind, WorldConfig};
    use crate::submap::{CameraRole, LoopClosure};

    fn world(kind: TrajectoryKind, frames: usize) -> World {
        World::generate(&WorldConfig {
            kind,
            frames,
            landmarks_per_frame: 5,
            ..WorldConfig::default()
        })
        .unwrap()
    }

    fn plan(id: usize, ids: Vec<usize>) -> SubmapPlan {
        SubmapPlan {
            id,
            common: Vec::new(),
            assistant: ids.clone(),
            keyframes: ids,
            loop_closure: None,
        }
    }

    #[test]
    fn undistorted_output_is_local_truth() {
        let w = world(TrajectoryKind::Arc, 120);
        let s = w.synthesize_submap(&plan(0, vec![40, 43, 46, 50]), &DistortionConfig::none()).unwrap();
        let a = w.primary_pose(40);
        for f in &s.primary {
            let truth = a.inverse() * w.primary_pose(f.frame);
            assert!((f.pose.translation - truth.translation).norm() < 1e-12);
            assert!(f.pose.rotation.angle_to(&truth.rotation) < 1e-12);
        }
        let g = s.primary[2].depth.as_ref().unwrap();
        assert_eq!(g, &w.render_depth(&w.primary_pose(46)));
        for f in &s.assistant {
            let truth = a.inverse() * w.assistant_pose(f.frame);
            assert!((f.pose.translation - truth.translation).norm() < 1e-12);
        }
    }

    #[test]
    fn multiplier_scales_translation_and_depth() {
        let w = world(TrajectoryKind::Line, 60);
        let cfg = DistortionConfig {
            scale_multipliers: vec![2.5],
            ..DistortionConfig::none()
        };
        let s = w.synthesize_submap(&plan(0, vec![10, 12, 14]), &cfg).unwrap();
        let truth = (w.primary_pose(14).translation - w.primary_pose(10).translation).norm();
        assert!((s.primary[2].pose.translation.norm() - 2.5 * truth).abs() < 1e-9);
        let d0 = w.render_depth(&w.primary_pose(12));
        let d1 = s.primary[1].depth.as_ref().unwrap();
        for (a, b) in d0.depth.iter().zip(&d1.depth) {
            assert!((b - 2.5 * a).abs() < 1e-9);
        }
    }

    #[test]
    fn correction_undoes_corruption_to_second_order() {
        let w = world(TrajectoryKind::Arc, 120);
        let cfg = DistortionConfig {
            intrinsic_scales: vec![[1.02, 0.985]],
            assistant_intrinsic_scales: vec![[1.0, 1.0]],
            ..DistortionConfig::none()
        };
        let s = w.synthesize_submap(&plan(0, vec![40, 45]), &cfg).unwrap();
        let est = s.primary[0].pose.inverse() * s.primary[1].pose;
        let truth = w.primary_pose(40).inverse() * w.primary_pose(45);
        let se = ScalingError::new(1.02, 0.985).unwrap();
        let fixed = correct_step(&est, &se, CorrectionOptions::default()).corrected;
        let raw_err = (est.translation - truth.translation).norm();
        let fixed_err = (fixed.translation - truth.translation).norm();
        // Residual is second order in the focal error.
        let eps: f64 = 0.02;
        assert!(fixed_err < 2.0 * eps * eps * truth.translation.norm(), "{fixed_err}");
        assert!(fixed_err < 0.2 * raw_err, "{fixed_err} vs {raw_err}");
    }

    #[test]
    fn draws_are_deterministic_and_independent_per_submap() {
        let w = world(TrajectoryKind::Line, 30);
        let cfg = DistortionConfig::default();
        assert_eq!(w.distortion_for(3, &cfg), w.distortion_for(3, &cfg));
        assert_ne!(w.distortion_for(3, &cfg), w.distortion_for(4, &cfg));
    }

    #[test]
    fn loop_frame_is_reestimated() {
        let w = world(TrajectoryKind::Loop, 200);
        let mut p = plan(0, vec![190, 195, 199]);
        p.loop_closure = Some(LoopClosure {
            current: 199,
            historical: 0,
        });
        let s = w.synthesize_submap(&p, &DistortionConfig::none()).unwrap();
        let lf = s.loop_frame.as_ref().unwrap();
        let truth = w.primary_pose(190).inverse() * w.primary_pose(0);
        assert_eq!(lf.frame, 0);
        assert!((lf.pose.translation - truth.translation).norm() < 1e-9);
        assert!(lf.depth.is_some());
    }

    #[test]
    fn async_assistant_uses_its_own_time() {
        let w = World::generate(&WorldConfig {
            frames: 40,
            landmarks_per_frame: 5,
            assistant_offset: 0.03,
            ..WorldConfig::default()
        })
        .unwrap();
        let s = w.synthesize_submap(&plan(0, vec![5, 8, 11]), &DistortionConfig::none()).unwrap();
        for f in &s.assistant {
            assert_eq!(f.timestamp(), w.timestamp(CameraRole::Assistant, f.frame));
            let truth = w.primary_pose(5).inverse() * w.assistant_pose(f.frame);
            assert!((f.pose.translation - truth.translation).norm() < 1e-3);
        }
    }

    #[test]
    fn warp_reference_frame_is_exact_radial() {
        let w = world(TrajectoryKind::Line, 60);
        let cfg = DistortionConfig {
            warp_a: 0.05,
            warp_b: 0.02,
            ..DistortionConfig::none()
        };
        let s = w.synthesize_submap(&plan(0, vec![10, 12, 14]), &cfg).unwrap();
        let truth = w.render_depth(&w.primary_pose(12));
        let warped = s.primary[1].depth.as_ref().unwrap();
        let hd = (1240.0f64.powi(2) + 376.0f64.powi(2)).sqrt() / 2.0;
        let mut checked = 0;
        for r in 0..truth.rows {
            for c in 0..truth.cols {
                let i = truth.index(r, c);
                if truth.confidence[i] == 0.0 || warped.confidence[i] == 0.0 {
                    continue;
                }
                let px = truth.sample_pixel(r, c);
                let rho = ((px.x - 620.0).powi(2) + (px.y - 188.0).powi(2)).sqrt() / hd;
                let g = 1.0 + 0.05 * rho * rho + 0.02 * rho.powi(4);
                assert!((warped.depth[i] - truth.depth[i] * g).abs() < 1e-8 * truth.depth[i]);
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn warped_frames_agree_on_shared_points() {
        let w = world(TrajectoryKind::Line, 60);
        let cfg = DistortionConfig {
            warp_a: 0.05,
            ..DistortionConfig::none()
        };
        let s = w.synthesize_submap(&plan(0, vec![10, 12, 14]), &cfg).unwrap();
        let k = w.config.intrinsics;
        let (a, b) = (&s.primary[0], &s.primary[2]);
        let ga = a.depth.as_ref().unwrap();
        let gb = b.depth.as_ref().unwrap();
        let mut agreed = 0;
        for r in 0..ga.rows {
            for c in 0..ga.cols {
                let i = ga.index(r, c);
                if ga.confidence[i] == 0.0 {
                    continue;
                }
                let p = a.pose.transform_point(&k.back_project(&ga.sample_pixel(r, c), ga.depth[i]));
                let q = b.pose.inverse().transform_point(&p);
                let Some(px) = k.project(&q) else { continue };
                if let Some(d) = gb.interpolate(&px, crate::submap::PLANARITY_TOLERANCE) {
                    assert!((d.depth - q.z).abs() < 5e-3 * q.z, "{} vs {}", d.depth, q.z);
                    agreed += 1;
                }
            }
        }
        assert!(agreed > 20, "{agreed}");
    }
}
