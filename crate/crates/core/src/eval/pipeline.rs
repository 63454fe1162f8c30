//! End-to-end run: simulate, build and correct sub-maps, optimize, map and
//! score against ground truth.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::Matrix3;

use crate::align::{pose_alignment, Similarity};
use crate::correction::{
    rectify_assistant_chain, rectify_primary_chain, scaling_from_intrinsics, write_correction_log,
    ChainStepLog, CorrectionOptions,
};
use crate::geometry::{eight_point, Intrinsics, Pose, Rotation, Vec3};
use crate::mapping::{build_map, CloudPoint, write_anchor_csv, write_point_cloud, MapResult};
use crate::pgo::{write_graph, FactorGraph, OptimizationReport, Values};
use crate::scale::{bracketed_pose, chain_to_world, max_bracket, measure_spacing, rectify_submap};
use crate::search::{candidate_pairs, GroupOutcome, TestBank};
use crate::simulator::World;
use crate::submap::{plan_submap, select_keyframes, CameraRole, LoopClosure, Submap, SubmapPlan, SyncMode};

use super::config::RunConfig;
use super::metrics::{ate, cloud_metrics, scale_drift_windows, Alignment, CloudMetrics, ScaleDrift};
use super::tum::write_trajectory;

/// Minimum landmark matches for a fundamental-matrix pair to be attempted.
const MIN_PAIR_MATCHES: usize = 8;

#[derive(Debug, thiserror::Error)]
#[error("stage '{stage}' failed: {message}{}", world.as_ref().map(|p| format!(" (world: {})", p.display())).unwrap_or_default())]
pub struct PipelineError {
    pub stage: &'static str,
    pub message: String,
    /// Saved world that reproduces the failure, when an output directory was given.
    pub world: Option<PathBuf>,
}

/// One row of the intrinsic-estimate series.
#[derive(Clone, Debug, PartialEq)]
pub struct IntrinsicRow {
    pub submap: usize,
    pub estimate: Intrinsics,
    pub global: Intrinsics,
    pub lambda: f64,
    pub version: u64,
    pub group: Option<GroupOutcome>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub alignment: Alignment,
    pub ate: f64,
    /// ATE as a percentage of the ground-truth keyframe path length.
    pub ate_ratio: f64,
    pub trajectory_length: f64,
    pub scale: Option<ScaleDrift>,
    pub cloud: Option<CloudMetrics>,
    pub submaps: usize,
    pub keyframes: usize,
    pub loops: usize,
    pub anchors: usize,
    pub active_anchors: usize,
    pub pgo_iterations: usize,
    pub k_global: Intrinsics,
    pub lambda: f64,
    pub disabled: Vec<&'static str>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricReport {
    /// `metric,value` rows; timings are kept out so runs compare byte for byte.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        s.push_str("# ate_ratio = ate / ground-truth keyframe path length * 100 (assumed definition)\n");
        s.push_str("metric,value\n");
        let mut row = |k: &str, v: String| {
            let _ = writeln!(s, "{k},{v}");
        };
        row("alignment", self.alignment.name().into());
        row("ate", self.ate.to_string());
        row("ate_ratio", self.ate_ratio.to_string());
        row("trajectory_length", self.trajectory_length.to_string());
        row("scale_mean", opt(self.scale.as_ref().map(|d| d.mean)));
        row("scale_std", opt(self.scale.as_ref().map(|d| d.std)));
        row("scale_mean_error", opt(self.scale.as_ref().map(|d| (d.mean - 1.0).abs())));
        row("accuracy", opt(self.cloud.map(|c| c.accuracy)));
        row("completeness", opt(self.cloud.map(|c| c.completeness)));
        row("chamfer", opt(self.cloud.map(|c| c.chamfer)));
        row("submaps", self.submaps.to_string());
        row("keyframes", self.keyframes.to_string());
        row("loops", self.loops.to_string());
        row("anchors", self.anchors.to_string());
        row("active_anchors", self.active_anchors.to_string());
        row("pgo_iterations", self.pgo_iterations.to_string());
        row("k_global_fx", self.k_global.fx.to_string());
        row("k_global_fy", self.k_global.fy.to_string());
        row("lambda", self.lambda.to_string());
        row("disabled", self.disabled.join(" "));
        s
    }
}

pub struct PipelineOutput {
    pub config: RunConfig,
    pub world: World,
    pub submaps: Vec<Submap>,
    /// Keyframe ids in optimization order.
    pub keys: Vec<usize>,
    /// Final world poses of `keys`.
    pub estimate: Vec<Pose>,
    pub ground_truth: Vec<Pose>,
    pub extrinsic: Pose,
    pub map: MapResult,
    /// Ground-truth samples of the mapped keyframes.
    pub truth_cloud: Vec<Vec3>,
    /// Pose-based alignment applied to the map before cloud scoring.
    pub alignment: Similarity,
    pub report: MetricReport,
    pub timings: Vec<(&'static str, f64)>,
    pub intrinsic_series: Vec<IntrinsicRow>,
    pub bank: TestBank,
    pub correction_log: Vec<(usize, ChainStepLog)>,
    /// `(sub-map, factor, degenerate)`.
    pub scale_factors: Vec<(usize, f64, bool)>,
    pub graph: Option<FactorGraph>,
    pub pgo: Option<OptimizationReport>,
}

struct Stages {
    timings: Vec<(&'static str, f64)>,
    world_path: Option<PathBuf>,
}

impl Stages {
    fn run<T, E: std::fmt::Display>(&mut self, stage: &'static str, f: impl FnOnce() -> Result<T, E>) -> Result<T, PipelineError> {
        let start = Instant::now();
        let r = f();
        self.timings.push((stage, start.elapsed().as_secs_f64()));
        r.map_err(|e| PipelineError {
            stage,
            message: e.to_string(),
            world: self.world_path.clone(),
        })
    }
}

/// Chordal mean of a set of poses.
pub fn mean_pose(poses: &[Pose]) -> Pose {
    let mut m = Matrix3::zeros();
    let mut t = Vec3::zeros();
    for p in poses {
        m += p.rotation.matrix();
        t += p.translation;
    }
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    Pose::new(Rotation::from_matrix_unchecked(u * d * vt), t / poses.len().max(1) as f64)
}

/// Rig offset observed at each assistant frame of a sub-map, in assistant
/// time order.
///
/// Synchronized frames give `P⁻¹ A` directly. Otherwise the primary is
/// interpolated at the assistant time, giving `P(t_a)⁻¹ A`, and averaged with
/// the reverse observation `P_j⁻¹ A(t_j)` at the other primary endpoint `j` of
/// the same bracket, which cancels the first-order interpolation bias.
/// Frames outside the primary span give `None`.
pub fn observed_extrinsics(s: &Submap) -> Result<Vec<Option<Pose>>, String> {
    let primary = s.primary_poses();
    let mut assistant = s.assistant_poses();
    if assistant.iter().chain(&primary).any(|p| p.timestamp.is_none()) {
        return Err("pose without timestamp".into());
    }
    assistant.sort_by(|x, y| x.timestamp.unwrap().total_cmp(&y.timestamp.unwrap()));
    let (p_max, a_max) = (max_bracket(&primary), max_bracket(&assistant));
    let own = |t: f64| primary.iter().position(|p| p.timestamp == Some(t));
    Ok(assistant
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let t = a.timestamp.unwrap();
            let (p, lo, hi) = bracketed_pose(&primary, t, p_max)?;
            let forward = (p.inverse() * *a).without_timestamp();
            if lo == hi {
                return Some(forward);
            }
            // The primary frame this assistant frame was associated with is
            // the bracket end nearest in index order.
            let j = match own(primary[lo].timestamp.unwrap()) {
                Some(k) if k == i.min(primary.len() - 1) => hi,
                _ => lo,
            };
            let tj = primary[j].timestamp.unwrap();
            match bracketed_pose(&assistant, tj, a_max) {
                Some((aj, _, _)) => Some(mean_pose(&[forward, (primary[j].inverse() * aj).without_timestamp()])),
                None => Some(forward),
            }
        })
        .collect())
}

/// Applies the intrinsic correction to one raw sub-map.
fn correct_submap(
    raw: &Submap,
    k_global: &Intrinsics,
    lambda: f64,
    opts: CorrectionOptions,
) -> Result<(Submap, Vec<ChainStepLog>), String> {
    let mut s = raw.clone();
    let raw_primary = raw.primary_poses();
    let steps: Vec<(Pose, Intrinsics)> = raw_primary
        .windows(2)
        .map(|w| (w[0].inverse() * w[1], raw.intrinsics))
        .collect();
    let (rect, log) = rectify_primary_chain(raw_primary[0], &steps, k_global, lambda, opts).map_err(|e| e.to_string())?;
    for (f, p) in s.primary.iter_mut().zip(&rect) {
        let t = f.pose.timestamp;
        f.pose = *p;
        f.pose.timestamp = t;
    }
    let rect: Vec<Pose> = s.primary_poses();
    let sp = scaling_from_intrinsics(&raw.intrinsics, k_global).map_err(|e| e.to_string())?;
    let sa = scaling_from_intrinsics(&raw.assistant_intrinsics, k_global).map_err(|e| e.to_string())?;
    let joint = sp.mean(&sa);
    let assistant = rectify_assistant_chain(&raw_primary, &rect, &raw.assistant_poses(), &joint, lambda, opts);
    for (f, p) in s.assistant.iter_mut().zip(assistant) {
        f.pose = p.map_err(|e| e.to_string())?;
    }
    if let (Some(lc), Some(lf)) = (raw.loop_closure, s.loop_frame.as_mut()) {
        let idx = raw.primary.iter().position(|f| f.frame == lc.current).ok_or("loop frame without current frame")?;
        let step = raw_primary[idx].inverse() * lf.pose;
        let c = crate::correction::correct_step(&step, &sp.damped(lambda), opts);
        let t = lf.pose.timestamp;
        lf.pose = rect[idx] * c.corrected;
        lf.pose.timestamp = t;
    }
    Ok((s, log))
}

fn graph_keys(submaps: &[Submap]) -> Vec<(usize, usize)> {
    let mut keys = Vec::new();
    for (i, s) in submaps.iter().enumerate() {
        let frames = if i == 0 { s.primary_ids() } else { s.keyframes.clone() };
        keys.extend(frames.into_iter().map(|f| (f, i)));
    }
    keys
}

/// Pose graph over all keyframes: windowed primary odometry and assistant
/// factors from every sub-map, loop factors and an extrinsic prior.
pub fn build_pose_graph(submaps: &[Submap], cfg: &RunConfig) -> Result<(FactorGraph, Values), String> {
    let keys = graph_keys(submaps);
    let mut g = FactorGraph::new(keys.iter().map(|k| k.0).collect()).map_err(|e| e.to_string())?;
    let noise = cfg.pgo.between_noise();
    let poses: Vec<Pose> = keys
        .iter()
        .map(|&(f, s)| submaps[s].world_pose(f).ok_or(format!("frame {f} missing from sub-map {s}")))
        .collect::<Result<_, _>>()?;
    let mut prior = None;
    for s in submaps {
        let traj: Vec<(usize, Pose)> = s.primary.iter().map(|f| (f.frame, f.pose)).collect();
        g.add_primary_odometry(&traj, cfg.pgo.window, noise).map_err(|e| e.to_string())?;
        let x = observed_extrinsics(s)?;
        if prior.is_none() {
            prior = x.iter().flatten().next().copied();
        }
        for i in 1..traj.len() {
            let (Some(xa), Some(xb)) = (x[i], x[i - 1]) else {
                continue;
            };
            let va = traj[i].1 * xa;
            let vb = traj[i - 1].1 * xb;
            g.add_assistant_factor(traj[i].0, traj[i - 1].0, vb.inverse() * va, noise)
                .map_err(|e| e.to_string())?;
        }
        if let (Some(lc), Some(lf)) = (s.loop_closure, s.loop_frame.as_ref()) {
            let c = s.local_pose(lc.current).ok_or("loop current frame missing")?;
            g.add_loop_factor(lc.current, lc.historical, lf.pose.inverse() * c, noise)
                .map_err(|e| e.to_string())?;
        }
    }
    let extrinsic = prior.unwrap_or_else(Pose::identity);
    g.add_extrinsic_prior(extrinsic, cfg.pgo.prior_noise()).map_err(|e| e.to_string())?;
    Ok((g, Values { poses, extrinsic }))
}

/// Re-derives each sub-map's placement from optimized keyframe poses.
fn refit_to_world(submaps: &mut [Submap], keys: &[usize], poses: &[Pose]) {
    let lookup: std::collections::HashMap<usize, Pose> = keys.iter().copied().zip(poses.iter().copied()).collect();
    for s in submaps.iter_mut() {
        let candidates: Vec<Pose> = s
            .primary
            .iter()
            .filter_map(|f| lookup.get(&f.frame).map(|w| *w * f.pose.inverse()))
            .collect();
        if !candidates.is_empty() {
            s.to_world = mean_pose(&candidates);
        }
    }
}

fn truth_cloud(world: &World, frames: &[usize], tau_conf: f64) -> Vec<Vec3> {
    let k = world.config.intrinsics;
    let mut out = Vec::new();
    for &f in frames {
        let pose = world.primary_pose(f);
        let g = world.render_depth(&pose);
        for r in 0..g.rows {
            for c in 0..g.cols {
                let i = g.index(r, c);
                if g.confidence[i] > tau_conf && g.depth[i] > 0.0 {
                    out.push(pose.transform_point(&k.back_project(&g.sample_pixel(r, c), g.depth[i])));
                }
            }
        }
    }
    out
}

/// Runs every stage. With `out`, the generated world is saved there first so
/// that failures can be replayed.
pub fn run_pipeline(cfg: &RunConfig, out: Option<&Path>) -> Result<PipelineOutput, PipelineError> {
    let mut st = Stages {
        timings: Vec::new(),
        world_path: None,
    };
    st.run("config", || cfg.validate())?;
    let mut world_cfg = cfg.world.clone();
    world_cfg.assistant_offset = match cfg.pipeline.mode {
        SyncMode::Sync => 0.0,
        SyncMode::Async => cfg.pipeline.async_offset,
    };
    let world = st.run("simulate", || World::generate(&world_cfg))?;
    if let Some(dir) = out {
        let path = dir.join("world.json");
        st.run("simulate", || {
            std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
            world.save(&path).map_err(|e| e.to_string())
        })?;
        st.world_path = Some(path);
    }
    let output = run_stages(cfg, world, st)?;
    if let Some(dir) = out {
        output.export(dir)?;
    }
    Ok(output)
}

/// Runs every stage after simulation on a previously saved world.
pub fn replay_pipeline(cfg: &RunConfig, world: World, world_path: Option<PathBuf>) -> Result<PipelineOutput, PipelineError> {
    let mut st = Stages {
        timings: Vec::new(),
        world_path,
    };
    st.run("config", || cfg.validate())?;
    run_stages(cfg, world, st)
}

fn run_stages(cfg: &RunConfig, world: World, mut st: Stages) -> Result<PipelineOutput, PipelineError> {
    let batches = st.run("keyframes", || {
        let b = select_keyframes(&world.disparity_stream(), &cfg.pipeline);
        if b.is_empty() {
            Err("no keyframes selected".to_string())
        } else {
            Ok(b)
        }
    })?;

    let plans = st.run("plan", || -> Result<Vec<SubmapPlan>, String> {
        let pt: Vec<f64> = (0..world.frames()).map(|f| world.timestamp(CameraRole::Primary, f)).collect();
        let at: Vec<f64> = (0..world.frames()).map(|f| world.timestamp(CameraRole::Assistant, f)).collect();
        let mut plans: Vec<SubmapPlan> = Vec::with_capacity(batches.len());
        let mut history: Vec<usize> = Vec::new();
        for (id, kfs) in batches.iter().enumerate() {
            let mut p = plan_submap(id, kfs.clone(), plans.last(), &pt, &at, &cfg.pipeline).map_err(|e| e.to_string())?;
            let current = *p.keyframes.last().expect("non-empty batch");
            p.loop_closure = world
                .loop_oracle(current, &history, &cfg.loops)
                .map(|historical| LoopClosure { current, historical });
            history.extend(&p.keyframes);
            plans.push(p);
        }
        Ok(plans)
    })?;

    let raw: Vec<Submap> = st.run("synthesize", || {
        plans
            .iter()
            .map(|p| world.synthesize_submap(p, &cfg.distortion))
            .collect::<Result<Vec<_>, _>>()
    })?;

    let (bank, series) = st.run("intrinsics", || -> Result<_, String> {
        let mut bank = TestBank::new(cfg.search.clone());
        let mut series = Vec::with_capacity(raw.len());
        let interval = cfg.search.interval.max(1);
        for (k, s) in raw.iter().enumerate() {
            bank.propose_candidate(s.intrinsics);
            let mut group = None;
            if (k + 1) % interval == 0 {
                let kfs: Vec<usize> = raw[k + 1 - interval..=k].iter().flat_map(|s| s.keyframes.iter().copied()).collect();
                let pairs: Vec<_> = candidate_pairs(&kfs, cfg.search.pair_gap, cfg.search.max_pairs)
                    .into_iter()
                    .filter_map(|(a, b)| {
                        let m = world.synthesize_matches(a, b, MIN_PAIR_MATCHES).ok()?;
                        let f = eight_point(&m).ok()?;
                        Some((f, m.len()))
                    })
                    .collect();
                group = Some(bank.try_add_group(pairs));
            }
            series.push(IntrinsicRow {
                submap: k,
                estimate: s.intrinsics,
                global: bank.k_global().expect("initialized by the first candidate"),
                lambda: bank.damping_factor(),
                version: bank.version(),
                group,
            });
        }
        Ok((bank, series))
    })?;
    let k_global = bank.k_global().expect("at least one sub-map");
    let lambda = bank.damping_factor();

    let ab = &cfg.ablation;
    let opts = if ab.pose_correction {
        CorrectionOptions {
            rotation: ab.rotation_correction,
            translation: ab.translation_correction,
        }
    } else {
        CorrectionOptions::none()
    };
    let (mut submaps, correction_log) = st.run("correct", || -> Result<_, String> {
        let mut out = Vec::with_capacity(raw.len());
        let mut log = Vec::new();
        for s in &raw {
            let (c, l) = correct_submap(s, &k_global, lambda, opts)?;
            log.extend(l.into_iter().map(|r| (s.id, r)));
            out.push(c);
        }
        Ok((out, log))
    })?;

    let scale_factors = st.run("scale", || -> Result<_, String> {
        let mut factors = Vec::with_capacity(submaps.len());
        if !ab.scale_rectification {
            return Ok(submaps.iter().map(|s| (s.id, 1.0, false)).collect());
        }
        let reference = measure_spacing(&submaps[0]).map_err(|e| format!("first sub-map: {e}"))?.mean;
        let mut fallback = 1.0;
        for s in submaps.iter_mut() {
            let r = rectify_submap(s, reference, fallback).map_err(|e| e.to_string())?;
            fallback = r.scale;
            factors.push((s.id, r.scale, s.degenerate));
        }
        Ok(factors)
    })?;

    st.run("chain", || -> Result<(), String> {
        for i in 0..submaps.len() {
            let (done, rest) = submaps.split_at_mut(i);
            chain_to_world(&mut rest[0], done.last()).map_err(|e| e.to_string())?;
        }
        Ok(())
    })?;

    let loops = submaps.iter().filter(|s| s.loop_closure.is_some()).count();
    let (keys, estimate, extrinsic, graph, pgo) = st.run("pgo", || -> Result<_, String> {
        let (g, init) = build_pose_graph(&submaps, cfg)?;
        let keys = g.keys().to_vec();
        if !ab.optimization {
            return Ok((keys, init.poses, init.extrinsic, Some(g), None));
        }
        let (v, report) = g.optimize(&init, &cfg.pgo).map_err(|e| e.to_string())?;
        Ok((keys, v.poses, v.extrinsic, Some(g), Some(report)))
    })?;
    let estimate: Vec<Pose> = estimate
        .into_iter()
        .zip(&keys)
        .map(|(p, &f)| p.with_timestamp(world.timestamp(CameraRole::Primary, f)))
        .collect();
    if pgo.is_some() {
        refit_to_world(&mut submaps, &keys, &estimate);
    }

    let map = st.run("mapping", || build_map(&submaps, &k_global, &cfg.mapping_effective(), cfg.world.seed))?;

    let ground_truth: Vec<Pose> = keys.iter().map(|&f| world.primary_pose(f)).collect();
    let (report, truth, alignment) = st.run("metrics", || -> Result<_, String> {
        let est_pos: Vec<Vec3> = estimate.iter().map(|p| p.translation).collect();
        let gt_pos: Vec<Vec3> = ground_truth.iter().map(|p| p.translation).collect();
        let a = ate(&est_pos, &gt_pos, cfg.eval.alignment).map_err(|e| e.to_string())?;
        let length: f64 = gt_pos.windows(2).map(|w| (w[1] - w[0]).norm()).sum();
        let scale = scale_drift_windows(&est_pos, &gt_pos, cfg.eval.scale_window, cfg.eval.scale_stride).ok();
        let frames: Vec<usize> = submaps
            .iter()
            .enumerate()
            .flat_map(|(i, s)| if i == 0 { s.primary_ids() } else { s.keyframes.clone() })
            .collect();
        let truth = truth_cloud(&world, &frames, cfg.mapping.tau_conf);
        let cloud_align = pose_alignment(&estimate, &ground_truth, cfg.eval.alignment == Alignment::Sim3)
            .map_err(|e| e.to_string())?;
        let cloud_align = if cfg.eval.alignment == Alignment::None { Similarity::identity() } else { cloud_align };
        let est_cloud: Vec<Vec3> = map.cloud.iter().map(|p| cloud_align.apply(&p.position)).collect();
        let cloud = cloud_metrics(&est_cloud, &truth).ok();
        let report = MetricReport {
            alignment: cfg.eval.alignment,
            ate: a.rmse,
            ate_ratio: if length > 0.0 { a.rmse / length * 100.0 } else { 0.0 },
            trajectory_length: length,
            scale,
            cloud,
            submaps: submaps.len(),
            keyframes: keys.len(),
            loops,
            anchors: map.anchors.len(),
            active_anchors: map.active_count(),
            pgo_iterations: pgo.as_ref().map_or(0, |r| r.iterations),
            k_global,
            lambda,
            disabled: cfg.ablation.disabled(),
        };
        Ok((report, truth, cloud_align))
    })?;

    let output = PipelineOutput {
        config: cfg.clone(),
        world,
        submaps,
        keys,
        estimate,
        ground_truth,
        extrinsic,
        map,
        truth_cloud: truth,
        alignment,
        report,
        timings: st.timings,
        intrinsic_series: series,
        bank,
        correction_log,
        scale_factors,
        graph,
        pgo,
    };
    Ok(output)
}

impl RunConfig {
    /// Mapping settings with the ablation switches folded in.
    pub fn mapping_effective(&self) -> crate::mapping::MappingConfig {
        let mut m = self.mapping.clone();
        m.suppression &= self.ablation.local_suppression;
        m.adaptive_fusion &= self.ablation.adaptive_fusion;
        m.nonlinear &= self.ablation.nonlinear_align;
        m
    }
}

impl PipelineOutput {
    pub fn timing_csv(&self) -> String {
        let mut s = String::from("stage,seconds\n");
        for (stage, t) in &self.timings {
            let _ = writeln!(s, "{stage},{t:.6}");
        }
        s
    }

    pub fn scale_drift_csv(&self) -> String {
        let mut s = String::from("window,start,raw,normalized\n");
        if let Some(d) = &self.report.scale {
            for (i, ((st, r), n)) in d.starts.iter().zip(&d.raw).zip(&d.normalized).enumerate() {
                let _ = writeln!(s, "{i},{st},{r},{n}");
            }
        }
        s
    }

    pub fn intrinsics_csv(&self) -> String {
        let mut s = String::from("submap,fx_est,fy_est,fx_global,fy_global,lambda,version,group\n");
        for r in &self.intrinsic_series {
            let group = match r.group {
                None => String::new(),
                Some(GroupOutcome::Rejected { qualified }) => format!("rejected:{qualified}"),
                Some(GroupOutcome::Added { evicted, .. }) => if evicted { "added:evicted" } else { "added" }.to_string(),
            };
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{group}",
                r.submap, r.estimate.fx, r.estimate.fy, r.global.fx, r.global.fy, r.lambda, r.version
            );
        }
        s
    }

    pub fn scale_factors_csv(&self) -> String {
        let mut s = String::from("submap,factor,degenerate\n");
        for (id, f, d) in &self.scale_factors {
            let _ = writeln!(s, "{id},{f},{d}");
        }
        s
    }

    /// [`write_artifacts`](Self::write_artifacts) with failures reported as the
    /// `export` stage.
    pub fn export(&self, dir: &Path) -> Result<(), PipelineError> {
        self.write_artifacts(dir).map_err(|e| PipelineError {
            stage: "export",
            message: e.to_string(),
            world: Some(dir.join("world.json")).filter(|p| p.exists()),
        })
    }

    /// Writes trajectories, map, anchors, metrics, timings and plot series.
    pub fn write_artifacts(&self, dir: &Path) -> std::io::Result<()> {
        use std::fs::{self, File};
        use std::io::BufWriter;
        fs::create_dir_all(dir)?;
        write_trajectory(&self.estimate, BufWriter::new(File::create(dir.join("trajectory_estimate.tum"))?))?;
        write_trajectory(&self.ground_truth, BufWriter::new(File::create(dir.join("trajectory_truth.tum"))?))?;
        write_point_cloud(&self.map.cloud, BufWriter::new(File::create(dir.join("map.txt"))?))?;
        let truth: Vec<CloudPoint> = self
            .truth_cloud
            .iter()
            .map(|t| CloudPoint {
                position: *t,
                confidence: 1.0,
                submap: 0,
                frame: 0,
            })
            .collect();
        write_point_cloud(&truth, BufWriter::new(File::create(dir.join("map_truth.txt"))?))?;
        write_anchor_csv(&self.map.anchors, BufWriter::new(File::create(dir.join("anchors.csv"))?))?;
        fs::write(dir.join("metrics.csv"), self.report.to_csv())?;
        fs::write(dir.join("timings.csv"), self.timing_csv())?;
        fs::write(dir.join("scale_drift.csv"), self.scale_drift_csv())?;
        fs::write(dir.join("intrinsics.csv"), self.intrinsics_csv())?;
        fs::write(dir.join("scale_factors.csv"), self.scale_factors_csv())?;
        self.bank.write_csv(BufWriter::new(File::create(dir.join("bank.csv"))?))?;
        write_correction_log(BufWriter::new(File::create(dir.join("correction.csv"))?), &self.correction_log)?;
        if let Some(g) = &self.graph {
            write_graph(g, BufWriter::new(File::create(dir.join("graph.txt"))?))?;
        }
        fs::write(dir.join("config.toml"), self.config.to_toml())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(mut cfg: RunConfig) -> RunConfig {
        cfg.world.frames = 120;
        cfg
    }

    #[test]
    fn noiseless_run_is_exact() {
        let out = run_pipeline(&small(RunConfig::noiseless()), None).unwrap();
        assert!(out.report.ate < 1e-9, "ate {}", out.report.ate);
        let c = out.report.cloud.unwrap();
        assert!(c.chamfer < 1e-9, "chamfer {}", c.chamfer);
        assert!(out.report.anchors > 0);
    }

    #[test]
    fn mean_pose_of_identical_poses() {
        let p = Pose::new(crate::geometry::rodrigues(&Vec3::new(0.1, 0.2, 0.3)), Vec3::new(1.0, 2.0, 3.0));
        let m = mean_pose(&[p, p, p]);
        assert!(m.rotation.angle_to(&p.rotation) < 1e-12);
        assert!((m.translation - p.translation).norm() < 1e-12);
    }

    #[test]
    fn failures_name_the_stage() {
        let mut cfg = small(RunConfig::noiseless());
        cfg.pipeline.n_overlap = 0;
        let err = match run_pipeline(&cfg, None) {
            Err(e) => e,
            Ok(_) => panic!("invalid config accepted"),
        };
        assert_eq!(err.stage, "config");
    }
}
