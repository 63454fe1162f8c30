use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{eight_point, rodrigues, Intrinsics, PixelMatch, Pose, Vec2, Vec3};
use crate::submap::{CameraRole, DepthGrid};

use super::scene::{place_buildings, Building, SceneConfig, SpatialHash};
use super::trajectory::{Trajectory, TrajectoryKind};
use super::SimulatorError;

/// Version tag written into serialized worlds.
pub const WORLD_FORMAT_VERSION: u32 = 1;

const LANDMARK_MIN_DEPTH: f64 = 0.5;
const HASH_CELL: f64 = 16.0;
/// Longest ray per unit z-depth over the image (corner pixels), with margin.
const RAY_REACH: f64 = 1.45;

/// Everything needed to generate a ground-truth world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub kind: TrajectoryKind,
    pub frames: usize,
    /// Path length travelled between consecutive frames.
    pub step: f64,
    /// Seconds between consecutive primary frames.
    pub frame_period: f64,
    pub camera_height: f64,
    /// Amplitude (radians) of the slow pitch oscillation.
    pub pitch_amplitude: f64,
    /// Assistant optical center in the primary camera frame; its norm is the rig spacing.
    pub rig_translation: [f64; 3],
    /// Assistant orientation relative to the primary camera (rotation vector).
    pub rig_rotation: [f64; 3],
    pub intrinsics: Intrinsics,
    pub image_width: f64,
    pub image_height: f64,
    pub grid_cols: usize,
    pub grid_rows: usize,
    /// Depth beyond which samples carry no confidence.
    pub max_depth: f64,
    /// Confidence is `exp(−depth / confidence_falloff)`.
    pub confidence_falloff: f64,
    pub landmarks_per_frame: usize,
    /// Depth range at which landmarks are seeded.
    pub landmark_depth: (f64, f64),
    /// Landmarks further than this are not observed.
    pub landmark_max_depth: f64,
    /// Assistant stream delay in seconds (zero for a synchronized rig).
    pub assistant_offset: f64,
    pub scene: SceneConfig,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            kind: TrajectoryKind::Line,
            frames: 500,
            step: 1.0,
            frame_period: 0.1,
            camera_height: 1.5,
            pitch_amplitude: 0.02,
            rig_translation: [0.5, 0.0, 0.0],
            rig_rotation: [0.0, 3.0f64.to_radians(), 0.0],
            intrinsics: Intrinsics {
                fx: 718.0,
                fy: 718.0,
                cx: 620.0,
                cy: 188.0,
            },
            image_width: 1240.0,
            image_height: 376.0,
            grid_cols: 48,
            grid_rows: 16,
            max_depth: 80.0,
            confidence_falloff: 60.0,
            landmarks_per_frame: 20,
            landmark_depth: (4.0, 40.0),
            landmark_max_depth: 60.0,
            assistant_offset: 0.0,
            scene: SceneConfig::default(),
            seed: 42,
        }
    }
}

impl WorldConfig {
    /// `T_ext`: maps assistant camera coordinates into the primary camera frame.
    pub fn extrinsic(&self) -> Pose {
        Pose::new(
            rodrigues(&Vec3::from(self.rig_rotation)),
            Vec3::from(self.rig_translation),
        )
    }

    /// Physical distance between the two optical centers.
    pub fn spacing(&self) -> f64 {
        Vec3::from(self.rig_translation).norm()
    }

    pub fn length(&self) -> f64 {
        self.step * (self.frames.saturating_sub(1)) as f64
    }

    pub fn validate(&self) -> Result<(), SimulatorError> {
        let bad = |m: &str| Err(SimulatorError::InvalidConfig(m.to_string()));
        if self.frames < 2 {
            return bad("at least two frames are required");
        }
        if !(self.spacing() > 0.0) {
            return bad("rig spacing must be positive");
        }
        if !(self.step >= 0.0 && self.frame_period > 0.0) {
            return bad("step must be non-negative and frame period positive");
        }
        if self.landmarks_per_frame == 0 {
            return Err(SimulatorError::NoLandmarks);
        }
        if self.grid_cols < 2 || self.grid_rows < 2 {
            return bad("depth grid must be at least 2x2");
        }
        if !(self.intrinsics.fx > 0.0 && self.intrinsics.fy > 0.0) {
            return bad("focal lengths must be positive");
        }
        if !(self.assistant_offset.abs() < self.frame_period) {
            return bad("assistant offset must be shorter than one frame period");
        }
        Ok(())
    }
}

/// Ground truth for one camera frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameObservation {
    pub frame: usize,
    pub role: CameraRole,
    pub timestamp: f64,
    pub pose: Pose,
    pub depth: DepthGrid,
    /// `(landmark id, pixel)`, sorted by id.
    pub landmarks: Vec<(usize, Vec2)>,
}

/// Trajectories, scene geometry and landmarks of one synthetic run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct World {
    pub version: u32,
    pub config: WorldConfig,
    pub trajectory: Trajectory,
    pub buildings: Vec<Building>,
    pub landmarks: Vec<Vec3>,
    #[serde(skip)]
    building_index: SpatialHash,
    #[serde(skip)]
    landmark_index: SpatialHash,
}

impl PartialEq for World {
    fn eq(&self, other: &Self) -> bool {
        self.version == other.version
            && self.config == other.config
            && self.trajectory == other.trajectory
            && self.buildings == other.buildings
            && self.landmarks == other.landmarks
    }
}

impl World {
    /// Builds a world deterministically from its configuration.
    pub fn generate(cfg: &WorldConfig) -> Result<World, SimulatorError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let trajectory = Trajectory::new(
            cfg.kind,
            cfg.length(),
            cfg.camera_height,
            cfg.pitch_amplitude,
            &mut rng,
        );
        let extent = cfg.length() + cfg.step * 2.0 + cfg.max_depth;
        let buildings = place_buildings(&trajectory, extent, &cfg.scene, &mut rng);
        let mut world = World {
            version: WORLD_FORMAT_VERSION,
            config: cfg.clone(),
            trajectory,
            buildings,
            landmarks: Vec::new(),
            building_index: SpatialHash::default(),
            landmark_index: SpatialHash::default(),
        };
        world.index_buildings();
        world.seed_landmarks(&mut rng);
        if world.landmarks.is_empty() {
            return Err(SimulatorError::NoLandmarks);
        }
        world.index_landmarks();
        Ok(world)
    }

    fn index_buildings(&mut self) {
        let mut h = SpatialHash::new(HASH_CELL);
        for (i, b) in self.buildings.iter().enumerate() {
            h.insert(i as u32, &b.center, b.footprint_radius());
        }
        self.building_index = h;
    }

    fn index_landmarks(&mut self) {
        let mut h = SpatialHash::new(HASH_CELL);
        for (i, p) in self.landmarks.iter().enumerate() {
            h.insert(i as u32, &p.xy(), 0.0);
        }
        self.landmark_index = h;
    }

    fn seed_landmarks(&mut self, rng: &mut ChaCha8Rng) {
        let cfg = &self.config;
        let k = cfg.intrinsics;
        let n = cfg.frames;
        let poses: Vec<Pose> = (0..n).map(|i| self.primary_pose(i)).collect();
        let mut out = Vec::with_capacity(n * cfg.landmarks_per_frame);
        for (f, pose) in poses.iter().enumerate() {
            for _ in 0..cfg.landmarks_per_frame {
                let px = Vec2::new(
                    rng.random_range(0.0..cfg.image_width),
                    rng.random_range(0.0..cfg.image_height),
                );
                let z = rng.random_range(cfg.landmark_depth.0..cfg.landmark_depth.1);
                let p = pose.transform_point(&k.back_project(&px, z));
                let lo = f.saturating_sub(5);
                let hi = (f + 5).min(n - 1);
                let seen_twice = (lo..=hi)
                    .filter(|&g| g != f)
                    .any(|g| self.project_landmark(&poses[g], &p).is_some());
                if seen_twice {
                    out.push(p);
                }
            }
        }
        self.landmarks = out;
    }

    pub fn frames(&self) -> usize {
        self.config.frames
    }

    /// Arc length reached at time `t`.
    fn arc_length(&self, t: f64) -> f64 {
        t * self.config.step / self.config.frame_period
    }

    pub fn timestamp(&self, role: CameraRole, frame: usize) -> f64 {
        let t = frame as f64 * self.config.frame_period;
        match role {
            CameraRole::Primary => t,
            CameraRole::Assistant => t + self.config.assistant_offset,
        }
    }

    /// Primary camera pose at an arbitrary time.
    pub fn primary_pose_at(&self, t: f64) -> Pose {
        self.trajectory.pose(self.arc_length(t)).with_timestamp(t)
    }

    /// Assistant camera pose at an arbitrary time: `T^p(t) · T_ext`.
    pub fn assistant_pose_at(&self, t: f64) -> Pose {
        (self.trajectory.pose(self.arc_length(t)) * self.config.extrinsic()).with_timestamp(t)
    }

    pub fn primary_pose(&self, frame: usize) -> Pose {
        self.primary_pose_at(self.timestamp(CameraRole::Primary, frame))
    }

    pub fn assistant_pose(&self, frame: usize) -> Pose {
        self.assistant_pose_at(self.timestamp(CameraRole::Assistant, frame))
    }

    pub fn pose(&self, role: CameraRole, frame: usize) -> Pose {
        match role {
            CameraRole::Primary => self.primary_pose(frame),
            CameraRole::Assistant => self.assistant_pose(frame),
        }
    }

    fn check_frame(&self, frame: usize) -> Result<(), SimulatorError> {
        if frame >= self.frames() {
            return Err(SimulatorError::UnknownFrame(frame));
        }
        Ok(())
    }

    /// Buildings that may be hit from anywhere within `radius` of `center`.
    pub(crate) fn building_candidates(&self, center: &Vec2, radius: f64) -> Vec<u32> {
        self.building_index.query(center, radius)
    }

    /// First hit of `origin + t · dir` with the ground or a candidate building.
    pub(crate) fn cast(&self, candidates: &[u32], origin: &Vec3, dir: &Vec3) -> Option<f64> {
        let mut best = if dir.z < 0.0 && origin.z > 0.0 {
            Some(-origin.z / dir.z)
        } else {
            None
        };
        for &i in candidates {
            if let Some(t) = self.buildings[i as usize].intersect(origin, dir) {
                if best.is_none_or(|b| t < b) {
                    best = Some(t);
                }
            }
        }
        best
    }

    /// Distance along the unit ray `origin + t · dir` to the first surface
    /// within `reach`.
    pub fn ray_distance(&self, origin: &Vec3, dir: &Vec3, reach: f64) -> Option<f64> {
        let cand = self.building_candidates(&origin.xy(), reach);
        self.cast(&cand, origin, dir).filter(|&t| t <= reach)
    }

    /// Candidate set covering every ray a camera at `pose` can see.
    pub(crate) fn view_candidates(&self, pose: &Pose) -> Vec<u32> {
        self.building_candidates(&pose.translation.xy(), RAY_REACH * self.config.max_depth)
    }

    pub(crate) fn confidence_for(&self, depth: f64) -> f64 {
        if depth > 0.0 && depth <= self.config.max_depth {
            (-depth / self.config.confidence_falloff).exp()
        } else {
            0.0
        }
    }

    /// True z-depth and confidence on the sample lattice.
    pub fn render_depth(&self, pose: &Pose) -> DepthGrid {
        let cfg = &self.config;
        let mut grid = DepthGrid::new(cfg.grid_cols, cfg.grid_rows, cfg.image_width, cfg.image_height);
        let cand = self.view_candidates(pose);
        for r in 0..grid.rows {
            for c in 0..grid.cols {
                let dir = pose.rotation * cfg.intrinsics.ray(&grid.sample_pixel(r, c));
                if let Some(z) = self.cast(&cand, &pose.translation, &dir) {
                    let conf = self.confidence_for(z);
                    if conf > 0.0 {
                        grid.set(r, c, z, conf);
                    }
                }
            }
        }
        grid
    }

    fn project_landmark(&self, pose: &Pose, p: &Vec3) -> Option<Vec2> {
        let cam = pose.inverse().transform_point(p);
        if !(cam.z > LANDMARK_MIN_DEPTH && cam.z <= self.config.landmark_max_depth) {
            return None;
        }
        let px = self.config.intrinsics.project(&cam)?;
        (px.x >= 0.0 && px.y >= 0.0 && px.x < self.config.image_width && px.y < self.config.image_height)
            .then_some(px)
    }

    /// Landmarks visible from `pose`, sorted by id.
    pub fn visible_landmarks(&self, pose: &Pose) -> Vec<(usize, Vec2)> {
        let reach = RAY_REACH * self.config.landmark_max_depth;
        self.landmark_index
            .query(&pose.translation.xy(), reach)
            .into_iter()
            .filter_map(|i| {
                let i = i as usize;
                self.project_landmark(pose, &self.landmarks[i]).map(|px| (i, px))
            })
            .collect()
    }

    pub fn observe(&self, role: CameraRole, frame: usize) -> Result<FrameObservation, SimulatorError> {
        self.check_frame(frame)?;
        let pose = self.pose(role, frame);
        Ok(FrameObservation {
            frame,
            role,
            timestamp: self.timestamp(role, frame),
            pose,
            depth: self.render_depth(&pose),
            landmarks: self.visible_landmarks(&pose),
        })
    }

    /// Mean landmark pixel displacement between consecutive primary frames.
    ///
    /// Entry 0 is zero; a pair with no co-visible landmark reports infinity.
    pub fn disparity_stream(&self) -> Vec<f64> {
        let n = self.frames();
        let mut out = Vec::with_capacity(n);
        out.push(0.0);
        let mut prev = self.visible_landmarks(&self.primary_pose(0));
        for f in 1..n {
            let cur = self.visible_landmarks(&self.primary_pose(f));
            let (mut i, mut j, mut sum, mut count) = (0, 0, 0.0, 0usize);
            while i < prev.len() && j < cur.len() {
                match prev[i].0.cmp(&cur[j].0) {
                    std::cmp::Ordering::Less => i += 1,
                    std::cmp::Ordering::Greater => j += 1,
                    std::cmp::Ordering::Equal => {
                        sum += (prev[i].1 - cur[j].1).norm();
                        count += 1;
                        i += 1;
                        j += 1;
                    }
                }
            }
            out.push(if count == 0 { f64::INFINITY } else { sum / count as f64 });
            prev = cur;
        }
        out
    }

    /// Exact pixel correspondences of landmarks co-visible in two primary frames.
    pub fn synthesize_matches(
        &self,
        a: usize,
        b: usize,
        min_matches: usize,
    ) -> Result<Vec<PixelMatch>, SimulatorError> {
        self.check_frame(a)?;
        self.check_frame(b)?;
        if a == b {
            return Err(SimulatorError::DegeneratePair(a));
        }
        let va = self.visible_landmarks(&self.primary_pose(a));
        let vb = self.visible_landmarks(&self.primary_pose(b));
        let mut out = Vec::new();
        let mut j = 0;
        for (id, px) in &va {
            while j < vb.len() && vb[j].0 < *id {
                j += 1;
            }
            if j < vb.len() && vb[j].0 == *id {
                out.push((*px, vb[j].1));
            }
        }
        if out.len() < min_matches.max(1) {
            return Err(SimulatorError::InsufficientCovisibility {
                a,
                b,
                found: out.len(),
                required: min_matches,
            });
        }
        Ok(out)
    }

    /// Earliest frame in `history` within `cfg.radius` of `current` whose
    /// index gap exceeds `cfg.min_gap`.
    pub fn loop_oracle(&self, current: usize, history: &[usize], cfg: &LoopConfig) -> Option<usize> {
        if !cfg.enabled {
            return None;
        }
        let here = self.primary_pose(current).translation;
        history
            .iter()
            .copied()
            .filter(|&h| h < current && current - h > cfg.min_gap)
            .filter(|&h| (self.primary_pose(h).translation - here).norm() <= cfg.radius)
            .min()
    }

    pub fn to_json(&self) -> Result<String, SimulatorError> {
        serde_json::to_string(self).map_err(|e| SimulatorError::Serialization(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<World, SimulatorError> {
        let mut w: World =
            serde_json::from_str(s).map_err(|e| SimulatorError::Serialization(e.to_string()))?;
        if w.version != WORLD_FORMAT_VERSION {
            return Err(SimulatorError::VersionMismatch {
                found: w.version,
                expected: WORLD_FORMAT_VERSION,
            });
        }
        w.trajectory.rebuild();
        w.index_buildings();
        w.index_landmarks();
        Ok(w)
    }

    pub fn save(&self, path: &Path) -> Result<(), SimulatorError> {
        std::fs::write(path, self.to_json()?).map_err(|e| SimulatorError::Io(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<World, SimulatorError> {
        let s = std::fs::read_to_string(path).map_err(|e| SimulatorError::Io(e.to_string()))?;
        World::from_json(&s)
    }

    /// Eight-point fundamental matrix between two primary frames (diagnostics).
    pub fn estimate_fundamental(
        &self,
        a: usize,
        b: usize,
        min_matches: usize,
    ) -> Result<crate::geometry::FundamentalMatrix, SimulatorError> {
        let m = self.synthesize_matches(a, b, min_matches)?;
        eight_point(&m).map_err(|e| SimulatorError::Degenerate(e.to_string()))
    }
}

/// Proximity-based loop detector settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    pub enabled: bool,
    pub radius: f64,
    /// Frame-index gap that must be exceeded.
    pub min_gap: usize,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            enabled: true,
            radius: 2.0,
            min_gap: 50,
        }
    }
}
