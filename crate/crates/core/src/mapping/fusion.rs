//! Distance-weighted anchor fusion and local suppression.

use serde::{Deserialize, Serialize};

use crate::geometry::Vec3;
use crate::spatial::KdTree;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnchorState {
    Active,
    Deactivated,
}

/// `1 / max(‖p − c‖², floor)`.
pub fn fusion_weight(point: &Vec3, center: &Vec3, floor: f64) -> f64 {
    1.0 / (point - center).norm_squared().max(floor)
}

/// Fuses world-frame observations `(T_{w,k} P_k, C_center^k)`.
///
/// With `adaptive` off every observation gets unit weight.
pub fn fuse(observations: &[(Vec3, Vec3)], floor: f64, adaptive: bool) -> Option<Vec3> {
    match observations {
        [] => return None,
        [(p, _)] => return Some(*p),
        _ => {}
    }
    let mut num = Vec3::zeros();
    let mut den = 0.0;
    for (p, c) in observations {
        let w = if adaptive { fusion_weight(p, c, floor) } else { 1.0 };
        num += p * w;
        den += w;
    }
    Some(num / den)
}

/// Deactivates every point that has a neighbor within `radius` observed by
/// strictly more sub-maps.
pub fn suppress(points: &[Vec3], n_obs: &[usize], radius: f64) -> Vec<AnchorState> {
    assert_eq!(points.len(), n_obs.len());
    let tree = KdTree::build(points);
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let beaten = tree.within_radius(p, radius).into_iter().any(|j| n_obs[j] > n_obs[i]);
            if beaten {
                AnchorState::Deactivated
            } else {
                AnchorState::Active
            }
        })
        .collect()
}

/// Linear-scan counterpart of [`suppress`].
pub fn suppress_brute(points: &[Vec3], n_obs: &[usize], radius: f64) -> Vec<AnchorState> {
    let r2 = radius * radius;
    (0..points.len())
        .map(|i| {
            let beaten = (0..points.len()).any(|j| {
                let d = points[j] - points[i];
                d.x * d.x + d.y * d.y + d.z * d.z <= r2 && n_obs[j] > n_obs[i]
            });
            if beaten {
                AnchorState::Deactivated
            } else {
                AnchorState::Active
            }
        })
        .collect()
}
