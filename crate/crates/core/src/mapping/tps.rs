//! Thin-plate-spline deformation in 3D with kernel `U(r) = r`.

use nalgebra::{DMatrix, SVD};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::umeyama;
use crate::geometry::{Mat3, Vec3};

/// Relative singular-value threshold below which controls count as coplanar.
const PLANAR_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TpsKind {
    Identity,
    Rigid,
    Affine,
    Full,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TpsError {
    #[error("{0} sources but {1} targets")]
    LengthMismatch(usize, usize),
    #[error("stiffness must be non-negative and finite, got {0}")]
    InvalidStiffness(f64),
}

/// `Φ(x) = A x + t + Σ w_i ‖x − p_i‖`.
#[derive(Clone, Debug, PartialEq)]
pub struct TpsModel {
    pub controls: Vec<Vec3>,
    pub weights: Vec<Vec3>,
    pub affine: Mat3,
    pub translation: Vec3,
    pub lambda: f64,
    pub kind: TpsKind,
    /// Set when a degenerate control layout forced a simpler model.
    pub fallback: bool,
}

impl TpsModel {
    pub fn identity() -> Self {
        TpsModel {
            controls: Vec::new(),
            weights: Vec::new(),
            affine: Mat3::identity(),
            translation: Vec3::zeros(),
            lambda: 0.0,
            kind: TpsKind::Identity,
            fallback: false,
        }
    }

    fn linear(affine: Mat3, translation: Vec3, kind: TpsKind, lambda: f64, fallback: bool) -> Self {
        TpsModel {
            affine,
            translation,
            kind,
            lambda,
            fallback,
            ..Self::identity()
        }
    }

    pub fn apply(&self, x: &Vec3) -> Vec3 {
        let mut y = self.affine * x + self.translation;
        for (p, w) in self.controls.iter().zip(&self.weights) {
            y += w * (x - p).norm();
        }
        y
    }

    pub fn apply_all(&self, xs: &[Vec3]) -> Vec<Vec3> {
        xs.par_iter().map(|x| self.apply(x)).collect()
    }

    /// `(‖Σ w_i‖, max_j ‖Σ w_i p_i[j]‖)`.
    pub fn side_conditions(&self) -> (f64, f64) {
        let sum: Vec3 = self.weights.iter().sum();
        let mut moment = Mat3::zeros();
        for (p, w) in self.controls.iter().zip(&self.weights) {
            moment += w * p.transpose();
        }
        (sum.norm(), moment.abs().max())
    }

    pub fn max_residual(&self, sources: &[Vec3], targets: &[Vec3]) -> f64 {
        sources
            .iter()
            .zip(targets)
            .map(|(s, t)| (self.apply(s) - t).norm())
            .fold(0.0, f64::max)
    }
}

fn centroid(xs: &[Vec3]) -> Vec3 {
    xs.iter().sum::<Vec3>() / xs.len() as f64
}

fn is_coplanar(centered: &[Vec3]) -> bool {
    let mut cov = Mat3::zeros();
    for p in centered {
        cov += p * p.transpose();
    }
    let sv = cov.symmetric_eigenvalues();
    let hi = sv.max();
    !(hi > 0.0) || sv.min() <= PLANAR_TOLERANCE * hi
}

/// Minimum-norm least-squares affine map on centered coordinates.
fn fit_affine(src: &[Vec3], dst: &[Vec3], c: &Vec3, lambda: f64) -> TpsModel {
    let n = src.len();
    let a = DMatrix::from_fn(n, 4, |i, j| if j < 3 { src[i][j] - c[j] } else { 1.0 });
    let b = DMatrix::from_fn(n, 3, |i, j| dst[i][j]);
    let svd = SVD::new(a, true, true);
    let eps = 1e-12 * svd.singular_values.max();
    let x = svd.solve(&b, eps).unwrap_or_else(|_| DMatrix::zeros(4, 3));
    let affine = Mat3::from_fn(|r, col| x[(col, r)]);
    let t0 = Vec3::new(x[(3, 0)], x[(3, 1)], x[(3, 2)]);
    TpsModel::linear(affine, t0 - affine * c, TpsKind::Affine, lambda, true)
}

/// Fits `Φ` so that `Φ(sources[i]) ≈ targets[i]`.
///
/// Fewer than four controls give a rigid model; coplanar or singular layouts
/// give a flagged affine model.
pub fn fit_tps(sources: &[Vec3], targets: &[Vec3], lambda: f64) -> Result<TpsModel, TpsError> {
    if sources.len() != targets.len() {
        return Err(TpsError::LengthMismatch(sources.len(), targets.len()));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(TpsError::InvalidStiffness(lambda));
    }
    let n = sources.len();
    if n == 0 {
        return Ok(TpsModel::identity());
    }
    if n < 4 {
        let model = match umeyama(sources, targets, false) {
            Ok(s) => TpsModel::linear(*s.rotation.matrix(), s.translation, TpsKind::Rigid, lambda, false),
            Err(_) => {
                let shift = centroid(targets) - centroid(sources);
                TpsModel::linear(Mat3::identity(), shift, TpsKind::Rigid, lambda, false)
            }
        };
        return Ok(model);
    }
    let c = centroid(sources);
    let centered: Vec<Vec3> = sources.iter().map(|p| p - c).collect();
    if is_coplanar(&centered) {
        return Ok(fit_affine(sources, targets, &c, lambda));
    }

    let m = n + 4;
    let mut sys = DMatrix::<f64>::zeros(m, m);
    let mut rhs = DMatrix::<f64>::zeros(m, 3);
    for i in 0..n {
        for j in 0..i {
            let u = (centered[i] - centered[j]).norm();
            sys[(i, j)] = u;
            sys[(j, i)] = u;
        }
        sys[(i, i)] = lambda;
        for k in 0..3 {
            sys[(i, n + k)] = centered[i][k];
            sys[(n + k, i)] = centered[i][k];
            rhs[(i, k)] = targets[i][k];
        }
        sys[(i, n + 3)] = 1.0;
        sys[(n + 3, i)] = 1.0;
    }
    let Some(sol) = sys.lu().solve(&rhs) else {
        return Ok(fit_affine(sources, targets, &c, lambda));
    };
    if sol.iter().any(|v| !v.is_finite()) {
        return Ok(fit_affine(sources, targets, &c, lambda));
    }
    let weights = (0..n).map(|i| Vec3::new(sol[(i, 0)], sol[(i, 1)], sol[(i, 2)])).collect();
    let affine = Mat3::from_fn(|r, col| sol[(n + col, r)]);
    let t0 = Vec3::new(sol[(n + 3, 0)], sol[(n + 3, 1)], sol[(n + 3, 2)]);
    Ok(TpsModel {
        controls: sources.to_vec(),
        weights,
        affine,
        translation: t0 - affine * c,
        lambda,
        kind: TpsKind::Full,
        fallback: false,
    })
}

/// Evenly spaced subset of at most `cap` indices out of `n`.
pub fn subsample(n: usize, cap: usize) -> Vec<usize> {
    if n <= cap {
        return (0..n).collect();
    }
    (0..cap).map(|i| i * n / cap).collect()
}
