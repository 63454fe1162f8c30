use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{Vec2, Vec3};

use super::trajectory::Trajectory;

/// Upright box standing on the ground plane, rotated by `yaw` about z.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Building {
    pub center: Vec2,
    pub half_extent: Vec2,
    pub yaw: f64,
    pub height: f64,
}

impl Building {
    pub fn footprint_radius(&self) -> f64 {
        self.half_extent.norm()
    }

    /// Entry distance of the ray `origin + t · dir` (t > 0), if it hits.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        let (s, c) = self.yaw.sin_cos();
        let rel = Vec2::new(origin.x - self.center.x, origin.y - self.center.y);
        let o = [c * rel.x + s * rel.y, -s * rel.x + c * rel.y, origin.z];
        let d = [c * dir.x + s * dir.y, -s * dir.x + c * dir.y, dir.z];
        let lo = [-self.half_extent.x, -self.half_extent.y, 0.0];
        let hi = [self.half_extent.x, self.half_extent.y, self.height];
        let mut t_near = f64::NEG_INFINITY;
        let mut t_far = f64::INFINITY;
        for k in 0..3 {
            if d[k].abs() < 1e-15 {
                if o[k] < lo[k] || o[k] > hi[k] {
                    return None;
                }
                continue;
            }
            let a = (lo[k] - o[k]) / d[k];
            let b = (hi[k] - o[k]) / d[k];
            t_near = t_near.max(a.min(b));
            t_far = t_far.min(a.max(b));
        }
        (t_near <= t_far && t_near > 1e-9).then_some(t_near)
    }
}

/// Uniform hash of planar points (or discs) into square cells.
#[derive(Clone, Debug, Default)]
pub struct SpatialHash {
    cell: f64,
    buckets: HashMap<(i64, i64), Vec<u32>>,
}

impl SpatialHash {
    pub fn new(cell: f64) -> Self {
        SpatialHash {
            cell,
            buckets: HashMap::new(),
        }
    }

    fn key(&self, p: &Vec2) -> (i64, i64) {
        ((p.x / self.cell).floor() as i64, (p.y / self.cell).floor() as i64)
    }

    /// Inserts an item covering the disc `(center, radius)`.
    pub fn insert(&mut self, id: u32, center: &Vec2, radius: f64) {
        let lo = self.key(&(center - Vec2::new(radius, radius)));
        let hi = self.key(&(center + Vec2::new(radius, radius)));
        for i in lo.0..=hi.0 {
            for j in lo.1..=hi.1 {
                self.buckets.entry((i, j)).or_default().push(id);
            }
        }
    }

    /// Sorted, de-duplicated ids whose cells intersect the square around `center`.
    pub fn query(&self, center: &Vec2, radius: f64) -> Vec<u32> {
        let lo = self.key(&(center - Vec2::new(radius, radius)));
        let hi = self.key(&(center + Vec2::new(radius, radius)));
        let mut out = Vec::new();
        for i in lo.0..=hi.0 {
            for j in lo.1..=hi.1 {
                if let Some(b) = self.buckets.get(&(i, j)) {
                    out.extend_from_slice(b);
                }
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// Parameters of the procedural street scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// Spacing of building slots along the path.
    pub spacing: f64,
    /// Probability that a slot on either side is filled.
    pub fill: f64,
    /// Range of the gap between the path and a building face.
    pub setback: (f64, f64),
    pub half_width: (f64, f64),
    pub height: (f64, f64),
    /// Minimum clearance between any camera position and a building.
    pub clearance: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            spacing: 12.0,
            fill: 0.75,
            setback: (5.0, 12.0),
            half_width: (2.5, 5.5),
            height: (4.0, 15.0),
            clearance: 3.0,
        }
    }
}

/// Places buildings on both sides of the path without touching it.
pub fn place_buildings<R: Rng>(
    trajectory: &Trajectory,
    extent: f64,
    cfg: &SceneConfig,
    rng: &mut R,
) -> Vec<Building> {
    let mut path = SpatialHash::new(16.0);
    let samples: Vec<Vec2> = (0..=(extent.ceil() as usize))
        .map(|i| trajectory.planar(i as f64))
        .collect();
    for (i, p) in samples.iter().enumerate() {
        path.insert(i as u32, p, 0.0);
    }
    let mut placed = SpatialHash::new(16.0);
    let mut out: Vec<Building> = Vec::new();
    let slots = (extent / cfg.spacing).ceil() as usize + 1;
    for slot in 0..slots {
        let s = slot as f64 * cfg.spacing;
        let base = trajectory.planar(s);
        let psi = trajectory.heading(s);
        let along = Vec2::new(psi.cos(), psi.sin());
        let left = Vec2::new(-psi.sin(), psi.cos());
        for side in [1.0, -1.0] {
            if rng.random::<f64>() >= cfg.fill {
                continue;
            }
            let half = Vec2::new(
                rng.random_range(cfg.half_width.0..cfg.half_width.1),
                rng.random_range(cfg.half_width.0..cfg.half_width.1),
            );
            let setback = rng.random_range(cfg.setback.0..cfg.setback.1);
            let jitter = rng.random_range(-0.3 * cfg.spacing..0.3 * cfg.spacing);
            let yaw = psi + rng.random_range(-0.3..0.3);
            let height = rng.random_range(cfg.height.0..cfg.height.1);
            let center = base + along * jitter + left * side * (setback + half.y);
            let b = Building {
                center,
                half_extent: half,
                yaw,
                height,
            };
            let reach = b.footprint_radius() + cfg.clearance;
            let blocked = path
                .query(&center, reach)
                .iter()
                .any(|&i| (samples[i as usize] - center).norm() < reach);
            let overlaps = placed.query(&center, 2.0 * reach).iter().any(|&j| {
                let o = &out[j as usize];
                (o.center - center).norm() < o.footprint_radius() + b.footprint_radius()
            });
            if blocked || overlaps {
                continue;
            }
            placed.insert(out.len() as u32, &center, b.footprint_radius());
            out.push(b);
        }
    }
    out
}
