//! Pose-graph optimization over primary poses and the rig extrinsic.
//!
//! Assistant poses are never variables: an assistant factor between frames
//! `i` and `j` constrains `T_i T_ext` and `T_j T_ext`. Updates are applied on
//! the right (`T ← T · exp(δ)`), tangent order `[ω; ρ]`.

mod envelope;
mod text;

use std::collections::HashMap;

use nalgebra::{DVector, SVector};
use serde::{Deserialize, Serialize};

use crate::geometry::{se3_adjoint, se3_exp, se3_log, se3_right_jacobian_inv, Mat6, Pose, Vec6};

pub use envelope::{EnvelopeMatrix, NotPositiveDefinite};
pub use text::{parse_graph, write_graph};

/// Whitened gradient entries below this mean the values are stationary.
const GRADIENT_TOLERANCE: f64 = 1e-12;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PgoError {
    #[error("factor references unknown frame {0}")]
    UnknownFrame(usize),
    #[error("self-factor on frame {0}")]
    SelfFactor(usize),
    #[error("duplicate frame {0} in the variable list")]
    DuplicateFrame(usize),
    #[error("noise sigmas must be positive")]
    InvalidNoise,
    #[error("normal equations stayed singular up to the maximum damping")]
    Singular,
    #[error("graph has no variables")]
    Empty,
    #[error("{count} values supplied for {expected} variables")]
    ValueCount { count: usize, expected: usize },
    #[error("graph text line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FactorKind {
    Odometry,
    Assistant,
    Prior,
    Loop,
}

/// Diagonal noise: one sigma for the three rotation axes and one for translation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub rotation: f64,
    pub translation: f64,
}

impl NoiseModel {
    pub fn isotropic(sigma: f64) -> Self {
        NoiseModel {
            rotation: sigma,
            translation: sigma,
        }
    }

    pub fn sigmas(&self) -> [f64; 6] {
        let (r, t) = (self.rotation, self.translation);
        [r, r, r, t, t, t]
    }

    pub fn is_valid(&self) -> bool {
        self.rotation > 0.0 && self.translation > 0.0 && self.rotation.is_finite() && self.translation.is_finite()
    }
}

/// One residual term.
#[derive(Clone, Debug, PartialEq)]
pub struct Factor {
    pub kind: FactorKind,
    /// Variable index of the later / current frame (unused for priors).
    pub a: usize,
    /// Variable index of the earlier / reference frame (unused for priors).
    pub b: usize,
    /// `T_b⁻¹ T_a` for between factors, the prior value for priors.
    pub measurement: Pose,
    pub sigmas: [f64; 6],
}

/// Variables: primary poses in key order plus the extrinsic.
#[derive(Clone, Debug, PartialEq)]
pub struct Values {
    pub poses: Vec<Pose>,
    pub extrinsic: Pose,
}

impl Values {
    /// Assistant pose of variable `i`, `T_i · T_ext`.
    pub fn assistant(&self, i: usize) -> Pose {
        let mut p = self.poses[i] * self.extrinsic;
        p.timestamp = self.poses[i].timestamp;
        p
    }
}

/// Solver and noise settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PgoConfig {
    /// Odometry window `K`.
    pub window: usize,
    pub rotation_sigma: f64,
    pub translation_sigma: f64,
    pub prior_sigma: f64,
    /// Huber threshold on whitened loop residual norms.
    pub huber: f64,
    pub max_iterations: usize,
    pub relative_tolerance: f64,
    pub initial_damping: f64,
    pub min_damping: f64,
    pub max_damping: f64,
}

impl Default for PgoConfig {
    fn default() -> Self {
        PgoConfig {
            window: 3,
            rotation_sigma: 0.05,
            translation_sigma: 0.1,
            prior_sigma: 0.01,
            huber: 1.0,
            max_iterations: 100,
            relative_tolerance: 1e-9,
            initial_damping: 1e-4,
            min_damping: 1e-9,
            max_damping: 1e6,
        }
    }
}

impl PgoConfig {
    pub fn between_noise(&self) -> NoiseModel {
        NoiseModel {
            rotation: self.rotation_sigma,
            translation: self.translation_sigma,
        }
    }

    pub fn prior_noise(&self) -> NoiseModel {
        NoiseModel::isotropic(self.prior_sigma)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizationReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Cost after each accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
    pub converged: bool,
}

/// Which variable a Jacobian block belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum VarRef {
    Pose(usize),
    Extrinsic,
}

/// Variables and factors of one optimization problem.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FactorGraph {
    keys: Vec<usize>,
    index: HashMap<usize, usize>,
    factors: Vec<Factor>,
}

fn between_residual(z: &Pose, a: &Pose, b: &Pose) -> Vec6 {
    se3_log(&(z.inverse() * b.inverse() * *a))
}

/// `log(Z⁻¹ · B⁻¹ · A)`: zero iff `B⁻¹ A = Z`.
pub fn residual_between(measurement: &Pose, a: &Pose, b: &Pose) -> Vec6 {
    between_residual(measurement, a, b)
}

/// Right-perturbation Jacobians `(∂r/∂A, ∂r/∂B)` of [`residual_between`].
pub fn between_jacobians(measurement: &Pose, a: &Pose, b: &Pose) -> (Mat6, Mat6) {
    let r = between_residual(measurement, a, b);
    let jr_inv = se3_right_jacobian_inv(&r);
    let ja = jr_inv;
    let jb = -jr_inv * se3_adjoint(&(a.inverse() * *b));
    (ja, jb)
}

impl FactorGraph {
    /// Graph over the given frame ids; the first one is held fixed.
    pub fn new(keys: Vec<usize>) -> Result<Self, PgoError> {
        if keys.is_empty() {
            return Err(PgoError::Empty);
        }
        let mut index = HashMap::with_capacity(keys.len());
        for (i, &k) in keys.iter().enumerate() {
            if index.insert(k, i).is_some() {
                return Err(PgoError::DuplicateFrame(k));
            }
        }
        Ok(FactorGraph {
            keys,
            index,
            factors: Vec::new(),
        })
    }

    pub fn keys(&self) -> &[usize] {
        &self.keys
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn index_of(&self, frame: usize) -> Option<usize> {
        self.index.get(&frame).copied()
    }

    pub fn count(&self, kind: FactorKind) -> usize {
        self.factors.iter().filter(|f| f.kind == kind).count()
    }

    /// Whether `T_ext` appears in any factor.
    pub fn uses_extrinsic(&self) -> bool {
        self.factors
            .iter()
            .any(|f| matches!(f.kind, FactorKind::Assistant | FactorKind::Prior))
    }

    fn lookup(&self, frame: usize) -> Result<usize, PgoError> {
        self.index_of(frame).ok_or(PgoError::UnknownFrame(frame))
    }

    fn push_between(
        &mut self,
        kind: FactorKind,
        a: usize,
        b: usize,
        measurement: Pose,
        noise: NoiseModel,
    ) -> Result<(), PgoError> {
        if !noise.is_valid() {
            return Err(PgoError::InvalidNoise);
        }
        if a == b {
            return Err(PgoError::SelfFactor(a));
        }
        let (ia, ib) = (self.lookup(a)?, self.lookup(b)?);
        self.factors.push(Factor {
            kind,
            a: ia,
            b: ib,
            measurement: measurement.without_timestamp(),
            sigmas: noise.sigmas(),
        });
        Ok(())
    }

    /// Odometry `(i − m, i)` for `m = 1..=window` from a trajectory of
    /// `(frame, pose)` in a common frame; measurements are relative poses.
    pub fn add_primary_odometry(
        &mut self,
        trajectory: &[(usize, Pose)],
        window: usize,
        noise: NoiseModel,
    ) -> Result<usize, PgoError> {
        let mut added = 0;
        for i in 1..trajectory.len() {
            for m in 1..=window.min(i) {
                let (fa, pa) = &trajectory[i];
                let (fb, pb) = &trajectory[i - m];
                self.push_between(FactorKind::Odometry, *fa, *fb, pb.inverse() * *pa, noise)?;
                added += 1;
            }
        }
        Ok(added)
    }

    /// Single odometry factor with an explicit measurement `T_b⁻¹ T_a`.
    pub fn add_odometry(&mut self, a: usize, b: usize, measurement: Pose, noise: NoiseModel) -> Result<(), PgoError> {
        self.push_between(FactorKind::Odometry, a, b, measurement, noise)
    }

    /// Constrains `(T_b T_ext)⁻¹ (T_a T_ext)` to `measurement`.
    pub fn add_assistant_factor(
        &mut self,
        a: usize,
        b: usize,
        measurement: Pose,
        noise: NoiseModel,
    ) -> Result<(), PgoError> {
        self.push_between(FactorKind::Assistant, a, b, measurement, noise)
    }

    pub fn add_loop_factor(
        &mut self,
        current: usize,
        historical: usize,
        measurement: Pose,
        noise: NoiseModel,
    ) -> Result<(), PgoError> {
        self.push_between(FactorKind::Loop, current, historical, measurement, noise)
    }

    pub fn add_extrinsic_prior(&mut self, prior: Pose, noise: NoiseModel) -> Result<(), PgoError> {
        if !noise.is_valid() {
            return Err(PgoError::InvalidNoise);
        }
        self.factors.push(Factor {
            kind: FactorKind::Prior,
            a: 0,
            b: 0,
            measurement: prior.without_timestamp(),
            sigmas: noise.sigmas(),
        });
        Ok(())
    }

    /// Unwhitened residual of one factor.
    pub fn residual(&self, f: &Factor, v: &Values) -> Vec6 {
        match f.kind {
            FactorKind::Prior => se3_log(&(f.measurement.inverse() * v.extrinsic)),
            FactorKind::Assistant => between_residual(&f.measurement, &v.assistant(f.a), &v.assistant(f.b)),
            _ => between_residual(&f.measurement, &v.poses[f.a], &v.poses[f.b]),
        }
    }

    /// Analytic Jacobian blocks of one factor's residual.
    pub fn jacobians(&self, f: &Factor, v: &Values) -> Vec<(VarRef, Mat6)> {
        match f.kind {
            FactorKind::Prior => {
                let r = self.residual(f, v);
                vec![(VarRef::Extrinsic, se3_right_jacobian_inv(&r))]
            }
            FactorKind::Assistant => {
                let (a, b) = (v.assistant(f.a), v.assistant(f.b));
                let (ja, jb) = between_jacobians(&f.measurement, &a, &b);
                let ad = se3_adjoint(&v.extrinsic.inverse());
                vec![
                    (VarRef::Pose(f.a), ja * ad),
                    (VarRef::Pose(f.b), jb * ad),
                    (VarRef::Extrinsic, ja + jb),
                ]
            }
            _ => {
                let (ja, jb) = between_jacobians(&f.measurement, &v.poses[f.a], &v.poses[f.b]);
                vec![(VarRef::Pose(f.a), ja), (VarRef::Pose(f.b), jb)]
            }
        }
    }

    fn whiten(f: &Factor, r: &Vec6) -> Vec6 {
        Vec6::from_fn(|i, _| r[i] / f.sigmas[i])
    }

    /// IRLS weight and robust cost of a whitened residual.
    fn robust(&self, f: &Factor, rw: &Vec6, huber: f64) -> (f64, f64) {
        let s2 = rw.norm_squared();
        if f.kind != FactorKind::Loop || huber <= 0.0 {
            return (1.0, s2);
        }
        let s = s2.sqrt();
        if s <= huber {
            (1.0, s2)
        } else {
            (huber / s, 2.0 * huber * s - huber * huber)
        }
    }

    /// Total cost `½ Σ ρ(‖Σ^{-1/2} r‖)`; Huber applies to loop factors only.
    pub fn cost(&self, v: &Values, huber: f64) -> f64 {
        0.5 * self
            .factors
            .iter()
            .map(|f| {
                let rw = Self::whiten(f, &self.residual(f, v));
                self.robust(f, &rw, huber).1
            })
            .sum::<f64>()
    }

    fn check_values(&self, v: &Values) -> Result<(), PgoError> {
        if v.poses.len() != self.keys.len() {
            return Err(PgoError::ValueCount {
                count: v.poses.len(),
                expected: self.keys.len(),
            });
        }
        Ok(())
    }

    /// Column offset of a free variable, `None` for the gauge pose or an
    /// unused extrinsic.
    fn column(&self, var: VarRef, uses_ext: bool) -> Option<usize> {
        match var {
            VarRef::Pose(0) => None,
            VarRef::Pose(i) => Some(6 * (i - 1)),
            VarRef::Extrinsic => uses_ext.then(|| 6 * (self.keys.len() - 1)),
        }
    }

    fn dimension(&self, uses_ext: bool) -> usize {
        6 * (self.keys.len() - 1) + if uses_ext { 6 } else { 0 }
    }

    /// Gradient `Jᵀ Σ⁻¹ r` over the free variables (gauge excluded; the
    /// extrinsic block is last when present).
    pub fn gradient(&self, v: &Values, huber: f64) -> DVector<f64> {
        let uses_ext = self.uses_extrinsic();
        let mut g = DVector::zeros(self.dimension(uses_ext));
        for f in &self.factors {
            let r = self.residual(f, v);
            let rw = Self::whiten(f, &r);
            let (w, _) = self.robust(f, &rw, huber);
            let wr = Vec6::from_fn(|i, _| w * rw[i] / f.sigmas[i]);
            for (var, j) in self.jacobians(f, v) {
                if let Some(c) = self.column(var, uses_ext) {
                    let gi = j.transpose() * wr;
                    for k in 0..6 {
                        g[c + k] += gi[k];
                    }
                }
            }
        }
        g
    }

    fn profile(&self, uses_ext: bool) -> Vec<usize> {
        let n = self.dimension(uses_ext);
        let mut first: Vec<usize> = (0..n).map(|i| i - i % 6).collect();
        for f in &self.factors {
            let vars: Vec<VarRef> = match f.kind {
                FactorKind::Prior => vec![VarRef::Extrinsic],
                FactorKind::Assistant => vec![VarRef::Pose(f.a), VarRef::Pose(f.b), VarRef::Extrinsic],
                _ => vec![VarRef::Pose(f.a), VarRef::Pose(f.b)],
            };
            let cols: Vec<usize> = vars.iter().filter_map(|v| self.column(*v, uses_ext)).collect();
            let Some(&lo) = cols.iter().min() else { continue };
            for &c in &cols {
                for row in c..c + 6 {
                    first[row] = first[row].min(lo);
                }
            }
        }
        first
    }

    fn normal_equations(&self, v: &Values, huber: f64, uses_ext: bool) -> (EnvelopeMatrix, DVector<f64>) {
        let mut h = EnvelopeMatrix::with_profile(self.profile(uses_ext));
        let mut g = DVector::zeros(self.dimension(uses_ext));
        for f in &self.factors {
            let r = self.residual(f, v);
            let rw = Self::whiten(f, &r);
            let (w, _) = self.robust(f, &rw, huber);
            let info = SVector::<f64, 6>::from_fn(|i, _| w / (f.sigmas[i] * f.sigmas[i]));
            let blocks: Vec<(usize, Mat6)> = self
                .jacobians(f, v)
                .into_iter()
                .filter_map(|(var, j)| self.column(var, uses_ext).map(|c| (c, j)))
                .collect();
            for (ca, ja) in &blocks {
                let jt_info = ja.transpose() * Mat6::from_diagonal(&info);
                let gi = jt_info * r;
                for k in 0..6 {
                    g[ca + k] += gi[k];
                }
                for (cb, jb) in &blocks {
                    if cb > ca {
                        continue;
                    }
                    let blk = jt_info * jb;
                    for p in 0..6 {
                        for q in 0..6 {
                            let (row, col) = (ca + p, cb + q);
                            if col <= row {
                                h.add(row, col, blk[(p, q)]);
                            }
                        }
                    }
                }
            }
        }
        (h, g)
    }

    fn retract(&self, v: &Values, delta: &DVector<f64>, uses_ext: bool) -> Values {
        let mut out = v.clone();
        for i in 1..self.keys.len() {
            let c = 6 * (i - 1);
            let d = Vec6::from_fn(|k, _| delta[c + k]);
            let t = out.poses[i].timestamp;
            out.poses[i] = out.poses[i] * se3_exp(&d);
            out.poses[i].timestamp = t;
        }
        if uses_ext {
            let c = 6 * (self.keys.len() - 1);
            let d = Vec6::from_fn(|k, _| delta[c + k]);
            out.extrinsic = out.extrinsic * se3_exp(&d);
        }
        out
    }

    /// Levenberg–Marquardt on `H + μI`. The first pose never moves.
    pub fn optimize(&self, initial: &Values, cfg: &PgoConfig) -> Result<(Values, OptimizationReport), PgoError> {
        self.check_values(initial)?;
        let uses_ext = self.uses_extrinsic();
        let mut v = initial.clone();
        let mut cost = self.cost(&v, cfg.huber);
        let mut report = OptimizationReport {
            iterations: 0,
            initial_cost: cost,
            final_cost: cost,
            cost_history: vec![cost],
            converged: true,
        };
        if cost == 0.0 || self.dimension(uses_ext) == 0 {
            return Ok((v, report));
        }
        let mut mu = cfg.initial_damping;
        report.converged = false;
        while report.iterations < cfg.max_iterations {
            let (h, g) = self.normal_equations(&v, cfg.huber, uses_ext);
            if g.amax() < GRADIENT_TOLERANCE {
                report.converged = true;
                break;
            }
            report.iterations += 1;
            let mut accepted = false;
            let mut solved = false;
            while mu <= cfg.max_damping {
                let mut damped = h.clone();
                damped.add_diagonal(mu);
                let step = match damped.cholesky() {
                    Ok(l) => -l.solve_factored(&g),
                    Err(_) => {
                        mu *= 10.0;
                        continue;
                    }
                };
                solved = true;
                let candidate = self.retract(&v, &step, uses_ext);
                let new_cost = self.cost(&candidate, cfg.huber);
                if new_cost < cost {
                    let rel = (cost - new_cost) / cost;
                    v = candidate;
                    cost = new_cost;
                    report.cost_history.push(cost);
                    mu = (mu / 10.0).max(cfg.min_damping);
                    accepted = true;
                    if rel < cfg.relative_tolerance || cost == 0.0 {
                        report.converged = true;
                    }
                    break;
                }
                mu *= 10.0;
            }
            if !solved {
                return Err(PgoError::Singular);
            }
            if !accepted {
                // No damping level decreases the cost: minimum to working precision.
                report.converged = true;
                break;
            }
            if report.converged {
                break;
            }
        }
        report.final_cost = cost;
        Ok((v, report))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rodrigues, Vec3};
    use proptest::prelude::*;

    fn pose(r: [f64; 3], t: [f64; 3]) -> Pose {
        Pose::new(rodrigues(&Vec3::from(r)), Vec3::from(t))
    }

    fn chain(n: usize) -> Vec<Pose> {
        (0..n)
            .map(|i| {
                let s = i as f64;
                pose([0.01 * s, 0.05 * s, -0.02 * s], [0.3 * s.sin(), 0.1 * s, s])
            })
            .collect()
    }

    fn ext() -> Pose {
        pose([0.0, 0.05, 0.01], [0.5, 0.02, -0.01])
    }

    fn full_graph(truth: &[Pose], x: &Pose) -> FactorGraph {
        let n = truth.len();
        let mut g = FactorGraph::new((0..n).collect()).unwrap();
        let traj: Vec<(usize, Pose)> = truth.iter().copied().enumerate().collect();
        let noise = PgoConfig::default().between_noise();
        g.add_primary_odometry(&traj, 3, noise).unwrap();
        for i in 1..n {
            for m in 1..=3.min(i) {
                let a = truth[i] * *x;
                let b = truth[i - m] * *x;
                g.add_assistant_factor(i, i - m, b.inverse() * a, noise).unwrap();
            }
        }
        g.add_extrinsic_prior(*x, NoiseModel::isotropic(0.01)).unwrap();
        g.add_loop_factor(n - 1, 0, truth[0].inverse() * truth[n - 1], noise).unwrap();
        g
    }

    #[test]
    fn residual_examples() {
        let b = pose([0.1, 0.2, 0.3], [1.0, 2.0, 3.0]);
        let z = pose([0.0, 0.1, 0.0], [0.5, 0.0, 0.0]);
        assert!(residual_between(&z, &(b * z), &b).norm() < 1e-12);
        assert!(residual_between(&Pose::identity(), &b, &b).norm() < 1e-12);
        let a = b * z * pose([0.0, 0.0, 1f64.to_radians()], [0.0; 3]);
        let r = residual_between(&z, &a, &b);
        assert!((r[2] - 0.017453292519943295).abs() < 1e-12);
    }

    #[test]
    fn odometry_counts() {
        let noise = PgoConfig::default().between_noise();
        let count = |n: usize, k: usize| {
            let mut g = FactorGraph::new((0..n).collect()).unwrap();
            let t: Vec<(usize, Pose)> = chain(n).into_iter().enumerate().collect();
            g.add_primary_odometry(&t, k, noise).unwrap()
        };
        assert_eq!(count(2, 3), 1);
        assert_eq!(count(5, 3), 9);
        assert_eq!(count(7, 1), 6);
    }

    #[test]
    fn self_factor_and_unknown_frame_rejected() {
        let mut g = FactorGraph::new(vec![3, 7]).unwrap();
        let n = PgoConfig::default().between_noise();
        assert_eq!(g.add_assistant_factor(3, 3, Pose::identity(), n), Err(PgoError::SelfFactor(3)));
        assert_eq!(g.add_loop_factor(3, 9, Pose::identity(), n), Err(PgoError::UnknownFrame(9)));
        assert_eq!(FactorGraph::new(vec![1, 1]).unwrap_err(), PgoError::DuplicateFrame(1));
    }

    #[test]
    fn exact_values_are_a_stationary_point() {
        let truth = chain(8);
        let g = full_graph(&truth, &ext());
        let v = Values {
            poses: truth.clone(),
            extrinsic: ext(),
        };
        assert!(g.gradient(&v, 1.0).norm() < 1e-10);
        let (out, rep) = g.optimize(&v, &PgoConfig::default()).unwrap();
        assert_eq!(rep.iterations, 0);
        assert_eq!(out, v);
    }

    #[test]
    fn perturbed_pose_is_recovered_and_gauge_held() {
        let truth = chain(10);
        let g = full_graph(&truth, &ext());
        let mut init = Values {
            poses: truth.clone(),
            extrinsic: ext(),
        };
        init.poses[5] = init.poses[5] * pose([0.02, -0.01, 0.03], [0.1, -0.2, 0.05]);
        let (out, rep) = g.optimize(&init, &PgoConfig::default()).unwrap();
        assert!(rep.converged);
        assert_eq!(out.poses[0], truth[0]);
        for (a, b) in out.poses.iter().zip(&truth) {
            assert!((a.translation - b.translation).norm() < 1e-8);
            assert!(a.rotation.angle_to(&b.rotation) < 1e-8);
        }
        for w in rep.cost_history.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn extrinsic_offset_vanishes() {
        let truth = chain(6);
        let mut g = FactorGraph::new((0..6).collect()).unwrap();
        let noise = PgoConfig::default().between_noise();
        for i in 1..6 {
            let a = truth[i] * ext();
            let b = truth[i - 1] * ext();
            g.add_assistant_factor(i, i - 1, b.inverse() * a, noise).unwrap();
        }
        let t: Vec<(usize, Pose)> = truth.iter().copied().enumerate().collect();
        g.add_primary_odometry(&t, 1, noise).unwrap();
        let x0 = ext() * Pose::from_translation(Vec3::new(0.01, 0.0, 0.0));
        let v = Values {
            poses: truth.clone(),
            extrinsic: x0,
        };
        assert!(g.cost(&v, 1.0) > 0.0);
        let (out, _) = g.optimize(&v, &PgoConfig::default()).unwrap();
        assert!(g.cost(&out, 1.0) < 1e-16);
    }

    #[test]
    fn prior_alone_pins_extrinsic() {
        let mut g = FactorGraph::new(vec![0]).unwrap();
        g.add_extrinsic_prior(ext(), NoiseModel::isotropic(0.01)).unwrap();
        let v = Values {
            poses: vec![Pose::identity()],
            extrinsic: Pose::identity(),
        };
        let (out, _) = g.optimize(&v, &PgoConfig::default()).unwrap();
        assert!((out.extrinsic.translation - ext().translation).norm() < 1e-9);
        assert!(out.extrinsic.rotation.angle_to(&ext().rotation) < 1e-9);
    }

    #[test]
    fn assistant_poses_follow_parameterization() {
        let v = Values {
            poses: chain(3),
            extrinsic: ext(),
        };
        assert_eq!(v.assistant(2), v.poses[2] * ext());
    }

    #[test]
    fn huber_downweights_gross_loop_outlier() {
        let truth = chain(12);
        let noise = PgoConfig::default().between_noise();
        let build = |huber_loop: bool| {
            let mut g = FactorGraph::new((0..12).collect()).unwrap();
            let t: Vec<(usize, Pose)> = truth.iter().copied().enumerate().collect();
            g.add_primary_odometry(&t, 1, noise).unwrap();
            let bad = truth[0].inverse() * truth[11] * pose([0.0, 0.3, 0.0], [3.0, 0.0, 0.0]);
            if huber_loop {
                g.add_loop_factor(11, 0, bad, noise).unwrap();
            } else {
                g.add_odometry(11, 0, bad, noise).unwrap();
            }
            g
        };
        let v = Values {
            poses: truth.clone(),
            extrinsic: Pose::identity(),
        };
        let cfg = PgoConfig::default();
        let err = |g: &FactorGraph| {
            let (o, _) = g.optimize(&v, &cfg).unwrap();
            (o.poses[11].translation - truth[11].translation).norm()
        };
        assert!(err(&build(true)) < err(&build(false)));
    }

    fn numeric_jacobian(g: &FactorGraph, f: &Factor, v: &Values, var: VarRef) -> Mat6 {
        let h = 1e-6;
        let mut out = Mat6::zeros();
        for k in 0..6 {
            let mut d = Vec6::zeros();
            d[k] = h;
            let shift = |s: f64| {
                let mut w = v.clone();
                let e = se3_exp(&(d * s));
                match var {
                    VarRef::Pose(i) => w.poses[i] = w.poses[i] * e,
                    VarRef::Extrinsic => w.extrinsic = w.extrinsic * e,
                }
                g.residual(f, &w)
            };
            let col = (shift(1.0) - shift(-1.0)) / (2.0 * h);
            out.set_column(k, &col);
        }
        out
    }

    proptest! {
        #[test]
        fn analytic_jacobians_match_finite_differences(
            r in proptest::array::uniform12(-0.8..0.8f64),
            t in proptest::array::uniform9(-3.0..3.0f64),
        ) {
            let p0 = pose([r[0], r[1], r[2]], [t[0], t[1], t[2]]);
            let p1 = pose([r[3], r[4], r[5]], [t[3], t[4], t[5]]);
            let x = pose([r[6], r[7], r[8]], [t[6], t[7], t[8]]);
            let z = pose([r[9], r[10], r[11]], [t[0], t[4], t[8]]);
            let mut g = FactorGraph::new(vec![0, 1]).unwrap();
            let n = NoiseModel::isotropic(1.0);
            g.add_odometry(1, 0, z, n).unwrap();
            g.add_assistant_factor(1, 0, z, n).unwrap();
            g.add_extrinsic_prior(z, n).unwrap();
            g.add_loop_factor(0, 1, z, n).unwrap();
            let v = Values { poses: vec![p0, p1], extrinsic: x };
            for f in g.factors() {
                for (var, j) in g.jacobians(f, &v) {
                    let num = numeric_jacobian(&g, f, &v, var);
                    let rel = (j - num).norm() / num.norm().max(1e-12);
                    prop_assert!(rel < 1e-4, "{:?} {:?} rel {}", f.kind, var, rel);
                }
            }
        }
    }
}
