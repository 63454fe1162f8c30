use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Intrinsics, Mat3, Vec2, Vec3};

/// Ratio of the second-smallest to the largest singular value of the
/// normalized design matrix below which the null space is considered
/// more than one-dimensional.
const DEGENERACY_RATIO: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum EpipolarError {
    #[error("need at least 8 correspondences, got {0}")]
    NotEnoughMatches(usize),
    #[error("degenerate correspondence configuration ({0})")]
    Degenerate(&'static str),
}

/// A correspondence `(x, x')` between two views, in pixels.
pub type PixelMatch = (Vec2, Vec2);

/// Fundamental matrix with `x'ᵀ F x = 0`, normalized to unit Frobenius norm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FundamentalMatrix(Mat3);

impl FundamentalMatrix {
    /// Wraps a matrix, enforcing rank 2 and unit Frobenius norm.
    pub fn from_matrix(m: Mat3) -> Self {
        FundamentalMatrix(enforce_rank2(&m).normalize())
    }

    /// Builds `K₂⁻ᵀ [t]× R K₁⁻¹` for a relative pose mapping view-1 camera
    /// coordinates into view 2 (`X₂ = R X₁ + t`).
    pub fn from_relative_pose(
        rotation: &Mat3,
        translation: &Vec3,
        k1: &Intrinsics,
        k2: &Intrinsics,
    ) -> Self {
        let e = super::skew(translation) * rotation;
        Self::from_matrix(k2.inverse_matrix().transpose() * e * k1.inverse_matrix())
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    /// Algebraic residual `x'ᵀ F x` of one correspondence.
    pub fn residual(&self, m: &PixelMatch) -> f64 {
        let x = Vec3::new(m.0.x, m.0.y, 1.0);
        let xp = Vec3::new(m.1.x, m.1.y, 1.0);
        xp.dot(&(self.0 * x))
    }

    /// Singular values in descending order.
    pub fn singular_values(&self) -> Vec3 {
        sorted_singular_values(&self.0)
    }
}

/// `E = Kᵀ F K` for a single shared camera.
pub fn essential_from_f(f: &FundamentalMatrix, k: &Intrinsics) -> Mat3 {
    let km = k.matrix();
    km.transpose() * f.matrix() * km
}

pub(crate) fn sorted_singular_values(m: &Mat3) -> Vec3 {
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Vec3::new(sv[0], sv[1], sv[2])
}

fn enforce_rank2(m: &Mat3) -> Mat3 {
    let svd = m.svd(true, true);
    let (u, v_t) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut s = svd.singular_values;
    let min_idx = s.imin();
    s[min_idx] = 0.0;
    u * Mat3::from_diagonal(&s) * v_t
}

/// Similarity moving the centroid to the origin with mean distance √2.
fn hartley_normalization(points: impl Iterator<Item = Vec2> + Clone) -> Option<Mat3> {
    let n = points.clone().count() as f64;
    let centroid = points.clone().fold(Vec2::zeros(), |acc, p| acc + p) / n;
    let mean_dist = points.map(|p| (p - centroid).norm()).sum::<f64>() / n;
    if mean_dist < 1e-12 * (1.0 + centroid.norm()) {
        return None;
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Some(Mat3::new(
        s,
        0.0,
        -s * centroid.x,
        0.0,
        s,
        -s * centroid.y,
        0.0,
        0.0,
        1.0,
    ))
}

/// Normalized eight-point estimate with rank-2 enforcement.
pub fn eight_point(matches: &[PixelMatch]) -> Result<FundamentalMatrix, EpipolarError> {
    if matches.len() < 8 {
        return Err(EpipolarError::NotEnoughMatches(matches.len()));
    }
    let t1 = hartley_normalization(matches.iter().map(|m| m.0))
        .ok_or(EpipolarError::Degenerate("no spread in first view"))?;
    let t2 = hartley_normalization(matches.iter().map(|m| m.1))
        .ok_or(EpipolarError::Degenerate("no spread in second view"))?;

    let rows = matches.len().max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (x, xp)) in matches.iter().enumerate() {
        let p = t1 * Vec3::new(x.x, x.y, 1.0);
        let q = t2 * Vec3::new(xp.x, xp.y, 1.0);
        let row = [
            q.x * p.x,
            q.x * p.y,
            q.x,
            q.y * p.x,
            q.y * p.y,
            q.y,
            p.x,
            p.y,
            1.0,
        ];
        for (j, v) in row.into_iter().enumerate() {
            a[(i, j)] = v;
        }
    }

    let svd = a.svd(false, true);
    let v_t = svd.v_t.expect("v_t");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let largest = svd.singular_values[order[0]];
    let second_smallest = svd.singular_values[order[7]];
    if largest <= 0.0 || second_smallest / largest < DEGENERACY_RATIO {
        return Err(EpipolarError::Degenerate("solution space is not one-dimensional"));
    }
    let null = v_t.row(order[8]);
    let f_norm = Mat3::from_row_slice(null.transpose().as_slice());
    let f_norm = enforce_rank2(&f_norm);
    Ok(FundamentalMatrix::from_matrix(
        t2.transpose() * f_norm * t1,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rodrigues, Pose};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn kitti_like() -> Intrinsics {
        Intrinsics::new(718.0, 718.0, 620.0, 188.0).unwrap()
    }

    /// Projects random points through two known cameras.
    fn stereo_matches(n: usize, seed: u64) -> (Vec<PixelMatch>, Pose, Pose) {
        let k = kitti_like();
        let cam1 = Pose::identity();
        let cam2 = Pose::new(
            rodrigues(&Vec3::new(0.02, -0.05, 0.01)),
            Vec3::new(0.4, -0.05, 1.0),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        while out.len() < n {
            let p = Vec3::new(
                rng.random_range(-6.0..6.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(5.0..30.0),
            );
            let x1 = k.project(&cam1.inverse().transform_point(&p));
            let x2 = k.project(&cam2.inverse().transform_point(&p));
            if let (Some(a), Some(b)) = (x1, x2) {
                out.push((a, b));
            }
        }
        (out, cam1, cam2)
    }

    #[test]
    fn recovers_exact_geometry() {
        let (m, c1, c2) = stereo_matches(20, 7);
        let f = eight_point(&m).unwrap();
        let mean = m.iter().map(|x| f.residual(x).abs()).sum::<f64>() / m.len() as f64;
        assert!(mean < 1e-8, "mean residual {mean}");
        let sv = f.singular_values();
        assert!(sv[2] / sv[0] <= 1e-6);
        // Independent route: F from the known relative pose.
        let rel = c2.inverse() * c1;
        let truth = FundamentalMatrix::from_relative_pose(
            rel.rotation.matrix(),
            &rel.translation,
            &kitti_like(),
            &kitti_like(),
        );
        let same = (f.matrix() - truth.matrix()).norm().min((f.matrix() + truth.matrix()).norm());
        assert!(same < 1e-6, "difference {same}");
    }

    #[test]
    fn seven_matches_rejected() {
        let (m, _, _) = stereo_matches(7, 1);
        assert_eq!(eight_point(&m), Err(EpipolarError::NotEnoughMatches(7)));
    }

    #[test]
    fn identical_matches_are_degenerate() {
        let p = (Vec2::new(100.0, 50.0), Vec2::new(100.0, 50.0));
        assert!(matches!(eight_point(&[p; 12]), Err(EpipolarError::Degenerate(_))));
    }

    #[test]
    fn zero_parallax_is_degenerate() {
        let (m, _, _) = stereo_matches(20, 3);
        let same: Vec<PixelMatch> = m.iter().map(|(a, _)| (*a, *a)).collect();
        assert!(matches!(eight_point(&same), Err(EpipolarError::Degenerate(_))));
    }

    #[test]
    fn essential_identity_intrinsics_passthrough() {
        let f = FundamentalMatrix::from_matrix(Mat3::new(
            0.0, -0.3, 0.2, 0.3, 0.0, -0.7, -0.2, 0.7, 0.0,
        ));
        let k = Intrinsics::new(1.0, 1.0, 0.0, 0.0).unwrap();
        assert_eq!(essential_from_f(&f, &k), *f.matrix());
    }

    #[test]
    fn essential_round_trip_from_known_pose() {
        let k = kitti_like();
        let r = rodrigues(&Vec3::new(0.1, -0.2, 0.05));
        let t = Vec3::new(0.3, 0.1, 1.0);
        let e = crate::geometry::skew(&t) * r.matrix();
        let f = FundamentalMatrix::from_matrix(k.inverse_matrix().transpose() * e * k.inverse_matrix());
        let e_back = essential_from_f(&f, &k);
        let scale = e.norm() / e_back.norm();
        let diff = (e_back * scale - e).norm().min((e_back * scale + e).norm());
        assert!(diff < 1e-7 * e.norm(), "diff {diff}");
        let sv = sorted_singular_values(&e_back);
        // F entries span ~6 orders of magnitude, so round-off is amplified by K.
        assert!((sv[0] - sv[1]).abs() / sv[0] < 1e-7, "{sv:?}");
        assert!(sv[2] / sv[0] < 1e-7, "{sv:?}");
    }
}
