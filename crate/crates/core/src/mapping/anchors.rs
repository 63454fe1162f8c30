//! Anchor extraction and propagation across sub-maps.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{Intrinsics, Vec2, Vec3};
use crate::submap::{FrameEstimate, Submap, PLANARITY_TOLERANCE};

use super::fusion::AnchorState;
use super::MappingConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub id: usize,
    /// Local coordinate per sub-map index.
    pub local: BTreeMap<usize, Vec3>,
    /// Pixel per frame id.
    pub observations: BTreeMap<usize, Vec2>,
    pub global: Option<Vec3>,
    pub state: AnchorState,
    /// Sub-map, frame and pixel the anchor was seeded from.
    pub origin: (usize, usize, Vec2),
}

impl Anchor {
    /// Number of sub-maps holding a local coordinate.
    pub fn n_obs(&self) -> usize {
        self.local.len()
    }
}

/// Grid-cell index of a pixel.
pub fn cell_of(pixel: &Vec2, width: f64, height: f64, n: usize) -> (usize, usize) {
    let cx = (pixel.x / (width / n as f64)).floor().max(0.0) as usize;
    let cy = (pixel.y / (height / n as f64)).floor().max(0.0) as usize;
    (cx.min(n - 1), cy.min(n - 1))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PropagationStats {
    pub seeded: usize,
    pub rejected: usize,
    pub forward: usize,
    pub backward: usize,
    pub loop_exchange: usize,
}

/// Single-writer anchor store over an ordered list of sub-maps.
///
/// Sub-maps are addressed by their position in the slice.
pub struct AnchorMap<'a> {
    submaps: &'a [Submap],
    k: Intrinsics,
    cfg: MappingConfig,
    anchors: Vec<Anchor>,
    members: Vec<Vec<usize>>,
    owner: HashMap<usize, usize>,
    pub stats: PropagationStats,
}

impl<'a> AnchorMap<'a> {
    /// `k` is the intrinsics used to back-project and project depth.
    pub fn new(submaps: &'a [Submap], k: Intrinsics, cfg: MappingConfig) -> Self {
        let mut owner = HashMap::new();
        for (i, s) in submaps.iter().enumerate() {
            for f in &s.keyframes {
                owner.entry(*f).or_insert(i);
            }
        }
        for (i, s) in submaps.iter().enumerate() {
            for f in s.primary_ids() {
                owner.entry(f).or_insert(i);
            }
        }
        AnchorMap {
            submaps,
            k,
            cfg,
            anchors: Vec::new(),
            members: vec![Vec::new(); submaps.len()],
            owner,
            stats: PropagationStats::default(),
        }
    }

    pub fn anchors(&self) -> &[Anchor] {
        &self.anchors
    }

    pub fn anchors_mut(&mut self) -> &mut [Anchor] {
        &mut self.anchors
    }

    pub fn into_anchors(self) -> Vec<Anchor> {
        self.anchors
    }

    /// Ids of anchors with a local coordinate in sub-map `s`.
    pub fn members(&self, s: usize) -> &[usize] {
        &self.members[s]
    }

    fn frame(&self, s: usize, frame: usize) -> Option<&FrameEstimate> {
        self.submaps[s].frame(frame)
    }

    /// Local point and depth seen at `pixel` of `frame` in sub-map `s`.
    pub fn local_point(&self, s: usize, frame: usize, pixel: &Vec2) -> Option<(Vec3, f64, f64)> {
        let f = self.frame(s, frame)?;
        let grid = f.depth.as_ref()?;
        let sample = grid.interpolate(pixel, PLANARITY_TOLERANCE)?;
        let cam = self.k.back_project(pixel, sample.depth);
        Some((f.pose.transform_point(&cam), sample.depth, sample.confidence))
    }

    /// Pixel and camera depth of a local point in `frame`, if inside the image.
    pub fn project(&self, s: usize, frame: usize, p: &Vec3) -> Option<(Vec2, f64)> {
        let f = self.frame(s, frame)?;
        let grid = f.depth.as_ref()?;
        let cam = f.pose.inverse().transform_point(p);
        let px = self.k.project(&cam)?;
        grid.in_image(&px).then_some((px, cam.z))
    }

    /// Depth-consistency test: the projected depth agrees with the estimated
    /// depth at the projected pixel within `eta` of the estimate.
    pub fn consistent(&self, s: usize, frame: usize, p: &Vec3) -> Option<Vec2> {
        let (px, z) = self.project(s, frame, p)?;
        let grid = self.frame(s, frame)?.depth.as_ref()?;
        let d = grid.interpolate(&px, PLANARITY_TOLERANCE)?.depth;
        ((z - d).abs() <= self.cfg.eta * d).then_some(px)
    }

    fn attach(&mut self, id: usize, s: usize, p: Vec3) {
        let prev = self.anchors[id].local.insert(s, p);
        debug_assert!(prev.is_none());
        self.members[s].push(id);
        self.observe(id, s);
    }

    /// Records the anchor's pixel in every frame of `s` that passes the
    /// depth-consistency test.
    fn observe(&mut self, id: usize, s: usize) {
        let p = self.anchors[id].local[&s];
        let hits: Vec<(usize, Vec2)> = self.submaps[s]
            .frames()
            .filter_map(|f| self.consistent(s, f.frame, &p).map(|px| (f.frame, px)))
            .collect();
        let obs = &mut self.anchors[id].observations;
        for (f, px) in hits {
            obs.entry(f).or_insert(px);
        }
    }

    /// Tries to seed an anchor at `pixel` of `frame` in sub-map `s`.
    ///
    /// The sample must exceed the confidence threshold and pass the
    /// depth-consistency test in at least one other primary frame of `s`.
    pub fn seed(&mut self, s: usize, frame: usize, pixel: &Vec2) -> Option<usize> {
        let (p, _, conf) = self.local_point(s, frame, pixel)?;
        if !(conf > self.cfg.tau_conf) {
            return None;
        }
        let verified = self.submaps[s]
            .primary
            .iter()
            .filter(|f| f.frame != frame)
            .any(|f| self.consistent(s, f.frame, &p).is_some());
        if !verified {
            self.stats.rejected += 1;
            return None;
        }
        let id = self.anchors.len();
        let mut observations = BTreeMap::new();
        observations.insert(frame, *pixel);
        self.anchors.push(Anchor {
            id,
            local: BTreeMap::new(),
            observations,
            global: None,
            state: AnchorState::Active,
            origin: (s, frame, *pixel),
        });
        self.attach(id, s, p);
        self.stats.seeded += 1;
        Some(id)
    }

    fn occupancy(&self, s: usize, frame: usize, width: f64, height: f64) -> Vec<bool> {
        let n = self.cfg.grid;
        let mut occ = vec![false; n * n];
        for &id in &self.members[s] {
            if let Some(px) = self.anchors[id].observations.get(&frame) {
                let (cx, cy) = cell_of(px, width, height, n);
                occ[cy * n + cx] = true;
            }
        }
        occ
    }

    /// Seeds anchors in every empty cell of every primary frame of `s`, in
    /// frame order. Returns the new ids.
    pub fn extract<R: Rng>(&mut self, s: usize, rng: &mut R) -> Vec<usize> {
        let mut created = Vec::new();
        let n = self.cfg.grid;
        let frames: Vec<usize> = self.submaps[s].primary_ids();
        for frame in frames {
            let Some(grid) = self.frame(s, frame).and_then(|f| f.depth.as_ref()) else {
                continue;
            };
            let (w, h) = (grid.width, grid.height);
            let (cw, ch) = (w / n as f64, h / n as f64);
            let mut occ = self.occupancy(s, frame, w, h);
            for cy in 0..n {
                for cx in 0..n {
                    if occ[cy * n + cx] {
                        continue;
                    }
                    for _ in 0..self.cfg.tries {
                        let px = Vec2::new(
                            (cx as f64 + rng.random::<f64>()) * cw,
                            (cy as f64 + rng.random::<f64>()) * ch,
                        );
                        if let Some(id) = self.seed(s, frame, &px) {
                            occ[cy * n + cx] = true;
                            created.push(id);
                            break;
                        }
                    }
                }
            }
        }
        created
    }

    /// Moves anchor `id` from sub-map `src` into `dst` through shared `frame`.
    /// With `gate` on, `dst`'s depth must agree with the anchor's depth in
    /// `src` within `eta`.
    fn transfer(&mut self, id: usize, src: usize, dst: usize, frame: usize, gate: bool) -> bool {
        let Some(px) = self.anchors[id].observations.get(&frame).copied() else {
            return false;
        };
        let Some((p, d, _)) = self.local_point(dst, frame, &px) else {
            return false;
        };
        if gate {
            let src_p = self.anchors[id].local[&src];
            let Some(f) = self.frame(src, frame) else {
                return false;
            };
            let z = f.pose.inverse().transform_point(&src_p).z;
            if (z - d).abs() > self.cfg.eta * d {
                return false;
            }
        }
        self.attach(id, dst, p);
        true
    }

    /// Copies anchors of sub-map `s − 1` seen in the common frames of `s`.
    pub fn propagate_forward(&mut self, s: usize) -> usize {
        if s == 0 {
            return 0;
        }
        let common = self.submaps[s].common.clone();
        let ids = self.members[s - 1].clone();
        let mut moved = 0;
        for id in ids {
            if self.anchors[id].local.contains_key(&s) {
                continue;
            }
            if common.iter().any(|&f| self.transfer(id, s - 1, s, f, false)) {
                moved += 1;
            }
        }
        self.stats.forward += moved;
        moved
    }

    /// Walks new anchors of `s` back through earlier sub-maps while they
    /// keep appearing in the bridging common frames.
    pub fn propagate_backward(&mut self, s: usize, ids: &[usize]) -> usize {
        let mut moved = 0;
        for &id in ids {
            let mut cur = s;
            let mut hops = 0;
            while cur > 0 && hops < self.cfg.backward_cap {
                let prev = cur - 1;
                if self.anchors[id].local.contains_key(&prev) {
                    break;
                }
                let bridge = self.submaps[cur].common.clone();
                if !bridge.iter().any(|&f| self.transfer(id, cur, prev, f, true)) {
                    break;
                }
                moved += 1;
                hops += 1;
                cur = prev;
            }
        }
        self.stats.backward += moved;
        moved
    }

    /// Exchanges anchors between `s` and the sub-map owning its loop
    /// partner frame, in both directions, one hop only.
    pub fn exchange_loop(&mut self, s: usize) -> usize {
        let Some(lc) = self.submaps[s].loop_closure else {
            return 0;
        };
        if self.submaps[s].loop_frame.is_none() {
            return 0;
        }
        let Some(&j) = self.owner.get(&lc.historical) else {
            return 0;
        };
        if j == s {
            return 0;
        }
        let h = lc.historical;
        let mut moved = 0;
        for id in self.members[s].clone() {
            if !self.anchors[id].local.contains_key(&j) && self.transfer(id, s, j, h, true) {
                moved += 1;
            }
        }
        for id in self.members[j].clone() {
            if !self.anchors[id].local.contains_key(&s) && self.transfer(id, j, s, h, true) {
                moved += 1;
            }
        }
        self.stats.loop_exchange += moved;
        moved
    }

    /// Full per-sub-map pass: forward copy, densification, backward walk and
    /// loop exchange.
    pub fn process<R: Rng>(&mut self, s: usize, rng: &mut R) {
        self.propagate_forward(s);
        let created = self.extract(s, rng);
        self.propagate_backward(s, &created);
        self.exchange_loop(s);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pose;
    use crate::submap::DepthGrid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn k() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 64.0, 48.0).unwrap()
    }

    /// Camera at `x` looking down +z at a fronto-parallel wall at depth `z`.
    fn wall_frame(frame: usize, x: f64, z: f64, conf: f64) -> FrameEstimate {
        let pose = Pose::from_translation(Vec3::new(x, 0.0, 0.0)).with_timestamp(frame as f64);
        let mut g = DepthGrid::new(16, 12, 128.0, 96.0);
        for r in 0..12 {
            for c in 0..16 {
                g.set(r, c, z, conf);
            }
        }
        FrameEstimate {
            frame,
            pose,
            depth: Some(g),
        }
    }

    fn submap(id: usize, frames: Vec<FrameEstimate>, common: usize) -> Submap {
        let ids: Vec<usize> = frames.iter().map(|f| f.frame).collect();
        Submap {
            id,
            common: ids[..common].to_vec(),
            keyframes: ids[common..].to_vec(),
            primary: frames,
            assistant: Vec::new(),
            loop_closure: None,
            loop_frame: None,
            intrinsics: k(),
            assistant_intrinsics: k(),
            scale: 1.0,
            to_world: Pose::identity(),
            degenerate: false,
        }
    }

    fn cfg() -> MappingConfig {
        MappingConfig {
            grid: 4,
            ..MappingConfig::default()
        }
    }

    #[test]
    fn cells_partition_the_image() {
        assert_eq!(cell_of(&Vec2::new(0.0, 0.0), 128.0, 96.0, 4), (0, 0));
        assert_eq!(cell_of(&Vec2::new(31.99, 24.0), 128.0, 96.0, 4), (0, 1));
        assert_eq!(cell_of(&Vec2::new(128.0, 96.0), 128.0, 96.0, 4), (3, 3));
    }

    #[test]
    fn static_camera_seeds_only_first_frame() {
        let maps = vec![submap(0, (0..3).map(|f| wall_frame(f, 0.0, 10.0, 1.0)).collect(), 0)];
        let mut am = AnchorMap::new(&maps, k(), cfg());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ids = am.extract(0, &mut rng);
        assert!(!ids.is_empty() && ids.len() <= 16);
        assert!(am.anchors().iter().all(|a| a.origin.1 == 0));
        for a in am.anchors() {
            assert_eq!(a.observations.len(), 3);
        }
    }

    #[test]
    fn low_confidence_gives_no_anchors() {
        let maps = vec![submap(0, (0..3).map(|f| wall_frame(f, 0.0, 10.0, 0.2)).collect(), 0)];
        let mut am = AnchorMap::new(&maps, k(), cfg());
        assert!(am.extract(0, &mut ChaCha8Rng::seed_from_u64(1)).is_empty());
    }

    #[test]
    fn inconsistent_depth_is_rejected() {
        let frames = vec![wall_frame(0, 0.0, 10.0, 1.0), wall_frame(1, 0.0, 11.0, 1.0)];
        let maps = vec![submap(0, frames, 0)];
        let mut am = AnchorMap::new(&maps, k(), cfg());
        assert_eq!(am.seed(0, 0, &Vec2::new(60.0, 40.0)), None);
        assert_eq!(am.stats.rejected, 1);
    }

    #[test]
    fn pan_adds_anchors_in_new_cells_only() {
        let frames = vec![wall_frame(0, 0.0, 10.0, 1.0), wall_frame(1, 3.2, 10.0, 1.0), wall_frame(2, 3.2, 10.0, 1.0)];
        let maps = vec![submap(0, frames, 0)];
        let mut am = AnchorMap::new(&maps, k(), cfg());
        am.extract(0, &mut ChaCha8Rng::seed_from_u64(3));
        let from_second: Vec<&Anchor> = am.anchors().iter().filter(|a| a.origin.1 == 1).collect();
        assert!(!from_second.is_empty());
        // A 3.2 shift at depth 10 moves pixels by 32, one cell; only the
        // right-most column of cells is new in frame 1.
        for a in from_second {
            let (cx, _) = cell_of(&a.origin.2, 128.0, 96.0, 4);
            assert!(cx >= 2, "cell {cx}");
        }
    }

    #[test]
    fn identical_depth_propagates_exactly() {
        let a: Vec<FrameEstimate> = (0..4).map(|f| wall_frame(f, 0.2 * f as f64, 10.0, 1.0)).collect();
        let b: Vec<FrameEstimate> = (2..6).map(|f| wall_frame(f, 0.2 * f as f64, 10.0, 1.0)).collect();
        let maps = vec![submap(0, a, 0), submap(1, b, 2)];
        let mut am = AnchorMap::new(&maps, k(), cfg());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        am.extract(0, &mut rng);
        let moved = am.propagate_forward(1);
        assert!(moved > 0);
        for a in am.anchors().iter().filter(|a| a.local.contains_key(&1)) {
            assert!((a.local[&0] - a.local[&1]).norm() < 1e-9);
        }
    }

    #[test]
    fn backward_chain_over_three_submaps() {
        let frames = |r: std::ops::Range<usize>| -> Vec<FrameEstimate> {
            r.map(|f| wall_frame(f, 0.1 * f as f64, 10.0, 1.0)).collect()
        };
        let maps = vec![submap(0, frames(0..4), 0), submap(1, frames(2..6), 2), submap(2, frames(4..8), 2)];
        let mut am = AnchorMap::new(&maps, k(), cfg());
        let p = Vec2::new(60.0, 50.0);
        let id = am.seed(2, 4, &p).unwrap();
        assert_eq!(am.propagate_backward(2, &[id]), 2);
        assert_eq!(am.anchors()[id].n_obs(), 3);
    }

    #[test]
    fn backward_gate_rejects_inconsistent_depth() {
        let a: Vec<FrameEstimate> = (0..4).map(|f| wall_frame(f, 0.0, 12.0, 1.0)).collect();
        let b: Vec<FrameEstimate> = (2..6).map(|f| wall_frame(f, 0.0, 10.0, 1.0)).collect();
        let maps = vec![submap(0, a, 0), submap(1, b, 2)];
        let mut am = AnchorMap::new(&maps, k(), cfg());
        let id = am.seed(1, 2, &Vec2::new(60.0, 50.0)).unwrap();
        assert_eq!(am.propagate_backward(1, &[id]), 0);
        assert_eq!(am.anchors()[id].n_obs(), 1);
    }

    #[test]
    fn anchor_seen_only_at_end_does_not_go_back() {
        let a: Vec<FrameEstimate> = (0..4).map(|f| wall_frame(f, 0.0, 10.0, 1.0)).collect();
        let mut b: Vec<FrameEstimate> = (2..6).map(|f| wall_frame(f, 0.0, 10.0, 1.0)).collect();
        // Common frames of `b` see a wall too far to match anything.
        for f in b.iter_mut().take(2) {
            f.depth.as_mut().unwrap().scale_depth(3.0);
        }
        let maps = vec![submap(0, a, 0), submap(1, b, 2)];
        let mut am = AnchorMap::new(&maps, k(), cfg());
        let id = am.seed(1, 5, &Vec2::new(60.0, 50.0)).unwrap();
        assert!(!am.anchors()[id].observations.contains_key(&2));
        assert_eq!(am.propagate_backward(1, &[id]), 0);
    }
}
