//! Trajectory and point-cloud accuracy metrics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{umeyama, AlignError, Similarity};
use crate::geometry::Vec3;
use crate::spatial::KdTree;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Alignment {
    None,
    Se3,
    #[default]
    Sim3,
}

impl Alignment {
    pub fn name(&self) -> &'static str {
        match self {
            Alignment::None => "none",
            Alignment::Se3 => "se3",
            Alignment::Sim3 => "sim3",
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricError {
    #[error("{0} estimated but {1} reference elements")]
    LengthMismatch(usize, usize),
    #[error("need at least {required} elements, got {found}")]
    TooShort { required: usize, found: usize },
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("alignment failed: {0}")]
    Align(#[from] AlignError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AteResult {
    pub rmse: f64,
    /// Maps the estimate onto the reference.
    pub transform: Similarity,
}

/// RMSE of position errors after aligning `est` to `gt`.
pub fn ate(est: &[Vec3], gt: &[Vec3], alignment: Alignment) -> Result<AteResult, MetricError> {
    if est.len() != gt.len() {
        return Err(MetricError::LengthMismatch(est.len(), gt.len()));
    }
    if est.len() < 2 {
        return Err(MetricError::TooShort {
            required: 2,
            found: est.len(),
        });
    }
    let transform = match alignment {
        Alignment::None => Similarity::identity(),
        Alignment::Se3 => umeyama(est, gt, false)?,
        Alignment::Sim3 => umeyama(est, gt, true)?,
    };
    let sum: f64 = est
        .iter()
        .zip(gt)
        .map(|(e, g)| (transform.apply(e) - g).norm_squared())
        .sum();
    Ok(AteResult {
        rmse: (sum / est.len() as f64).sqrt(),
        transform,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleDrift {
    /// Start index of each window.
    pub starts: Vec<usize>,
    /// Least-squares scale of the estimate relative to ground truth.
    pub raw: Vec<f64>,
    /// `raw / raw[0]`.
    pub normalized: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Sliding-window scale of `est` against `gt`, normalized by the first window.
pub fn scale_drift_windows(est: &[Vec3], gt: &[Vec3], window: usize, stride: usize) -> Result<ScaleDrift, MetricError> {
    if est.len() != gt.len() {
        return Err(MetricError::LengthMismatch(est.len(), gt.len()));
    }
    let window = window.max(2);
    if est.len() < window {
        return Err(MetricError::TooShort {
            required: window,
            found: est.len(),
        });
    }
    let stride = stride.max(1);
    let starts: Vec<usize> = (0..=est.len() - window).step_by(stride).collect();
    let raw = starts
        .iter()
        .map(|&s| Ok(umeyama(&gt[s..s + window], &est[s..s + window], true)?.scale))
        .collect::<Result<Vec<f64>, MetricError>>()?;
    let normalized: Vec<f64> = raw.iter().map(|r| r / raw[0]).collect();
    let n = normalized.len() as f64;
    let mean = normalized.iter().sum::<f64>() / n;
    let std = (normalized.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(ScaleDrift {
        starts,
        raw,
        normalized,
        mean,
        std,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CloudMetrics {
    /// Mean distance from each estimated point to the reference cloud.
    pub accuracy: f64,
    /// Mean distance from each reference point to the estimate.
    pub completeness: f64,
    pub chamfer: f64,
}

fn mean_nearest(from: &[Vec3], to: &KdTree) -> f64 {
    let d: Vec<f64> = from
        .par_iter()
        .map(|p| to.nearest(p).expect("non-empty tree").1)
        .collect();
    d.iter().sum::<f64>() / d.len() as f64
}

pub fn cloud_metrics(est: &[Vec3], truth: &[Vec3]) -> Result<CloudMetrics, MetricError> {
    if est.is_empty() || truth.is_empty() {
        return Err(MetricError::EmptyCloud);
    }
    let accuracy = mean_nearest(est, &KdTree::build(truth));
    let completeness = mean_nearest(truth, &KdTree::build(est));
    Ok(CloudMetrics {
        accuracy,
        completeness,
        chamfer: 0.5 * (accuracy + completeness),
    })
}
