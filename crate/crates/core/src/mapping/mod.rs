//! Anchor-driven global map construction.

mod anchors;
mod fusion;
mod tps;

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{Intrinsics, Pose, Vec3};
use crate::submap::Submap;

pub use anchors::{cell_of, Anchor, AnchorMap, PropagationStats};
pub use fusion::{fuse, fusion_weight, suppress, suppress_brute, AnchorState};
pub use tps::{fit_tps, subsample, TpsError, TpsKind, TpsModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MappingConfig {
    /// Cells per image side.
    pub grid: usize,
    pub tau_conf: f64,
    /// Relative depth tolerance of the projection test.
    pub eta: f64,
    /// Suppression radius.
    pub radius: f64,
    pub lambda_tps: f64,
    pub max_controls: usize,
    pub backward_cap: usize,
    /// Sampling attempts per empty cell.
    pub tries: usize,
    pub weight_floor: f64,
    pub suppression: bool,
    pub adaptive_fusion: bool,
    pub nonlinear: bool,
}

impl Default for MappingConfig {
    fn default() -> Self {
        MappingConfig {
            grid: 24,
            tau_conf: 0.5,
            eta: 0.02,
            radius: 0.4,
            lambda_tps: 1e-4,
            max_controls: 500,
            backward_cap: 10,
            tries: 3,
            weight_floor: 1e-8,
            suppression: true,
            adaptive_fusion: true,
            nonlinear: true,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MappingError {
    #[error("invalid mapping config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tps(#[from] TpsError),
}

impl MappingConfig {
    pub fn validate(&self) -> Result<(), MappingError> {
        let bad = |m: &str| Err(MappingError::InvalidConfig(m.into()));
        if self.grid == 0 {
            return bad("grid must be positive");
        }
        if !(self.eta > 0.0) {
            return bad("eta must be positive");
        }
        if !(self.radius >= 0.0) {
            return bad("radius must be non-negative");
        }
        if !(self.lambda_tps >= 0.0) {
            return bad("lambda_tps must be non-negative");
        }
        if !(self.weight_floor > 0.0) {
            return bad("weight_floor must be positive");
        }
        if !(0.0..=1.0).contains(&self.tau_conf) {
            return bad("tau_conf must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CloudPoint {
    pub position: Vec3,
    pub confidence: f64,
    pub submap: usize,
    pub frame: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubmapDeformation {
    pub submap: usize,
    pub kind: TpsKind,
    pub fallback: bool,
    pub controls: usize,
    /// Largest control-point residual of the fitted model.
    pub max_residual: f64,
}

#[derive(Clone, Debug)]
pub struct MapResult {
    pub anchors: Vec<Anchor>,
    pub stats: PropagationStats,
    pub models: Vec<TpsModel>,
    pub deformations: Vec<SubmapDeformation>,
    pub cloud: Vec<CloudPoint>,
}

impl MapResult {
    pub fn active_count(&self) -> usize {
        self.anchors.iter().filter(|a| a.state == AnchorState::Active).count()
    }
}

/// World position of the central keyframe's optical center.
pub fn center_of(s: &Submap) -> Vec3 {
    (s.to_world * s.central_frame().pose).position()
}

/// Fuses every anchor with a local coordinate, using each sub-map's
/// `to_world`.
pub fn fuse_anchors(anchors: &mut [Anchor], submaps: &[Submap], cfg: &MappingConfig) {
    let centers: Vec<Vec3> = submaps.iter().map(center_of).collect();
    for a in anchors.iter_mut() {
        let obs: Vec<(Vec3, Vec3)> = a
            .local
            .iter()
            .map(|(&s, p)| (submaps[s].to_world.transform_point(p), centers[s]))
            .collect();
        a.global = fuse(&obs, cfg.weight_floor, cfg.adaptive_fusion);
    }
}

/// Assigns anchor states from fused positions. With suppression disabled
/// every fused anchor stays active.
pub fn suppress_anchors(anchors: &mut [Anchor], cfg: &MappingConfig) {
    let fused: Vec<usize> = (0..anchors.len()).filter(|&i| anchors[i].global.is_some()).collect();
    if !cfg.suppression {
        for &i in &fused {
            anchors[i].state = AnchorState::Active;
        }
        return;
    }
    let pts: Vec<Vec3> = fused.iter().map(|&i| anchors[i].global.unwrap()).collect();
    let n: Vec<usize> = fused.iter().map(|&i| anchors[i].n_obs()).collect();
    for (state, &i) in suppress(&pts, &n, cfg.radius).into_iter().zip(&fused) {
        anchors[i].state = state;
    }
}

/// `(local sources, local targets)` of the active anchors of sub-map `s`,
/// evenly capped at `max_controls` in id order.
pub fn control_pairs(anchors: &[Anchor], s: usize, to_world: &Pose, cap: usize) -> (Vec<Vec3>, Vec<Vec3>) {
    let inv = to_world.inverse();
    let all: Vec<(Vec3, Vec3)> = anchors
        .iter()
        .filter(|a| a.state == AnchorState::Active)
        .filter_map(|a| Some((*a.local.get(&s)?, inv.transform_point(a.global.as_ref()?))))
        .collect();
    subsample(all.len(), cap).into_iter().map(|i| all[i]).unzip()
}

/// Local 3D samples of the confidence-gated depth of the given frames.
pub fn raw_cloud(s: &Submap, frames: &[usize], k: &Intrinsics, tau_conf: f64) -> Vec<(Vec3, f64, usize)> {
    let mut out = Vec::new();
    for &id in frames {
        let Some(f) = s.frame(id) else { continue };
        let Some(g) = f.depth.as_ref() else { continue };
        for r in 0..g.rows {
            for c in 0..g.cols {
                let i = g.index(r, c);
                let (d, conf) = (g.depth[i], g.confidence[i]);
                if conf > tau_conf && d > 0.0 {
                    let cam = k.back_project(&g.sample_pixel(r, c), d);
                    out.push((f.pose.transform_point(&cam), conf, id));
                }
            }
        }
    }
    out
}

/// `T_{w,k} · Φ(x)` for every sample of the sub-map's new keyframes.
pub fn deform_submap(s: &Submap, index: usize, model: &TpsModel, k: &Intrinsics, tau_conf: f64) -> Vec<CloudPoint> {
    let raw = raw_cloud(s, &s.keyframes, k, tau_conf);
    let locals: Vec<Vec3> = raw.iter().map(|r| r.0).collect();
    let warped = model.apply_all(&locals);
    warped
        .into_iter()
        .zip(raw)
        .map(|(p, (_, confidence, frame))| CloudPoint {
            position: s.to_world.transform_point(&p),
            confidence,
            submap: index,
            frame,
        })
        .collect()
}

/// Runs anchor extraction and propagation over all sub-maps in order, then
/// fusion, suppression, per-sub-map deformation fitting and cloud export.
///
/// `k` is the intrinsics used for all back-projection.
pub fn build_map(submaps: &[Submap], k: &Intrinsics, cfg: &MappingConfig, seed: u64) -> Result<MapResult, MappingError> {
    cfg.validate()?;
    let mut am = AnchorMap::new(submaps, *k, cfg.clone());
    for s in 0..submaps.len() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(s as u64);
        am.process(s, &mut rng);
    }
    let stats = am.stats;
    let mut anchors = am.into_anchors();
    fuse_anchors(&mut anchors, submaps, cfg);
    suppress_anchors(&mut anchors, cfg);

    let fitted: Vec<Result<(TpsModel, SubmapDeformation), TpsError>> = submaps
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let (src, dst) = control_pairs(&anchors, i, &s.to_world, cfg.max_controls);
            let model = if cfg.nonlinear {
                fit_tps(&src, &dst, cfg.lambda_tps)?
            } else {
                TpsModel::identity()
            };
            let info = SubmapDeformation {
                submap: i,
                kind: model.kind,
                fallback: model.fallback,
                controls: if cfg.nonlinear { src.len() } else { 0 },
                max_residual: if cfg.nonlinear { model.max_residual(&src, &dst) } else { 0.0 },
            };
            Ok((model, info))
        })
        .collect();
    let mut models = Vec::with_capacity(submaps.len());
    let mut deformations = Vec::with_capacity(submaps.len());
    for r in fitted {
        let (m, d) = r?;
        models.push(m);
        deformations.push(d);
    }
    let cloud = submaps
        .iter()
        .enumerate()
        .flat_map(|(i, s)| deform_submap(s, i, &models[i], k, cfg.tau_conf))
        .collect();
    Ok(MapResult {
        anchors,
        stats,
        models,
        deformations,
        cloud,
    })
}

/// ASCII point cloud: a header line with the count, then `x y z confidence`.
pub fn write_point_cloud<W: Write>(cloud: &[CloudPoint], mut w: W) -> std::io::Result<()> {
    writeln!(w, "# rigmap point cloud")?;
    writeln!(w, "points {}", cloud.len())?;
    for p in cloud {
        let q = p.position;
        writeln!(w, "{:.9} {:.9} {:.9} {:.6}", q.x, q.y, q.z, p.confidence)?;
    }
    Ok(())
}

pub fn read_point_cloud(text: &str) -> Result<Vec<(Vec3, f64)>, String> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim_start().starts_with('#'));
    let (_, header) = lines.next().ok_or("missing header")?;
    let count: usize = header
        .strip_prefix("points ")
        .and_then(|c| c.trim().parse().ok())
        .ok_or_else(|| format!("bad header '{header}'"))?;
    let mut out = Vec::with_capacity(count);
    for (n, l) in lines {
        let v: Vec<f64> = l
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|e| format!("line {}: {e}", n + 1))?;
        if v.len() != 4 {
            return Err(format!("line {}: expected 4 fields", n + 1));
        }
        out.push((Vec3::new(v[0], v[1], v[2]), v[3]));
    }
    if out.len() != count {
        return Err(format!("header says {count} points, found {}", out.len()));
    }
    Ok(out)
}

/// `id,n_obs,state,x,y,z`; unfused anchors leave the coordinates empty.
pub fn write_anchor_csv<W: Write>(anchors: &[Anchor], mut w: W) -> std::io::Result<()> {
    writeln!(w, "id,n_obs,state,x,y,z")?;
    for a in anchors {
        let state = match a.state {
            AnchorState::Active => "active",
            AnchorState::Deactivated => "deactivated",
        };
        match a.global {
            Some(p) => writeln!(w, "{},{},{},{:.9},{:.9},{:.9}", a.id, a.n_obs(), state, p.x, p.y, p.z)?,
            None => writeln!(w, "{},{},{},,,", a.id, a.n_obs(), state)?,
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec2;
    use std::collections::BTreeMap;

    fn anchor(id: usize, local: &[(usize, Vec3)]) -> Anchor {
        Anchor {
            id,
            local: local.iter().copied().collect(),
            observations: BTreeMap::new(),
            global: None,
            state: AnchorState::Active,
            origin: (0, 0, Vec2::zeros()),
        }
    }

    #[test]
    fn control_pairs_skip_inactive_and_map_to_local() {
        let mut a = vec![
            anchor(0, &[(0, Vec3::new(1.0, 0.0, 0.0))]),
            anchor(1, &[(0, Vec3::new(2.0, 0.0, 0.0))]),
            anchor(2, &[(1, Vec3::new(3.0, 0.0, 0.0))]),
        ];
        a[0].global = Some(Vec3::new(6.0, 0.0, 0.0));
        a[1].global = Some(Vec3::new(7.0, 0.0, 0.0));
        a[1].state = AnchorState::Deactivated;
        a[2].global = Some(Vec3::new(8.0, 0.0, 0.0));
        let tw = Pose::from_translation(Vec3::new(5.0, 0.0, 0.0));
        let (src, dst) = control_pairs(&a, 0, &tw, 500);
        assert_eq!(src, vec![Vec3::new(1.0, 0.0, 0.0)]);
        assert_eq!(dst, vec![Vec3::new(1.0, 0.0, 0.0)]);
    }

    #[test]
    fn suppression_toggle() {
        let mut a = vec![anchor(0, &[(0, Vec3::zeros())]), anchor(1, &[(0, Vec3::zeros()), (1, Vec3::zeros())])];
        a[0].global = Some(Vec3::zeros());
        a[1].global = Some(Vec3::new(0.1, 0.0, 0.0));
        let mut cfg = MappingConfig::default();
        suppress_anchors(&mut a, &cfg);
        assert_eq!(a[0].state, AnchorState::Deactivated);
        cfg.suppression = false;
        suppress_anchors(&mut a, &cfg);
        assert_eq!(a[0].state, AnchorState::Active);
    }

    #[test]
    fn cloud_round_trip_and_csv() {
        let cloud = vec![
            CloudPoint {
                position: Vec3::new(1.5, -2.0, 3.25),
                confidence: 0.75,
                submap: 0,
                frame: 3,
            };
            3
        ];
        let mut buf = Vec::new();
        write_point_cloud(&cloud, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("points 3\n1.500000000 -2.000000000 3.250000000 0.750000\n"));
        let back = read_point_cloud(&text).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back[0], (Vec3::new(1.5, -2.0, 3.25), 0.75));
        assert!(read_point_cloud("points 2\n1 2 3 4\n").is_err());

        let mut a = vec![anchor(0, &[(0, Vec3::zeros())]), anchor(1, &[])];
        a[0].global = Some(Vec3::new(1.0, 2.0, 3.0));
        let mut csv = Vec::new();
        write_anchor_csv(&a, &mut csv).unwrap();
        let csv = String::from_utf8(csv).unwrap();
        assert_eq!(
            csv,
            "id,n_obs,state,x,y,z\n0,1,active,1.000000000,2.000000000,3.000000000\n1,0,active,,,\n"
        );
    }

    #[test]
    fn invalid_config() {
        let cfg = MappingConfig {
            grid: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        assert!(MappingConfig::default().validate().is_ok());
    }
}
