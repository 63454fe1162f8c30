//! Keyframe selection, sub-map planning and the per-sub-map data model.

mod grid;
mod keyframes;

use serde::{Deserialize, Serialize};

use crate::geometry::{Intrinsics, Pose};

pub use grid::{DepthGrid, DepthSample, PLANARITY_TOLERANCE};
pub use keyframes::{associate_assistant, select_keyframes, KeyframeSelector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CameraRole {
    Primary,
    Assistant,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyncMode {
    #[default]
    Sync,
    Async,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SubmapError {
    #[error("no assistant frame with timestamp exactly {timestamp} (primary frame {frame})")]
    NoExactMatch { frame: usize, timestamp: f64 },
    #[error("assistant stream exhausted while associating primary frame {0}")]
    AssistantExhausted(usize),
    #[error("sub-map {0} has no keyframes")]
    Empty(usize),
    #[error("invalid pipeline configuration: {0}")]
    InvalidConfig(String),
}

/// Keyframe and sub-map batching parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Cumulative disparity (pixels) that must be exceeded to select a keyframe.
    pub tau_flow: f64,
    /// Keyframes per sub-map.
    pub n_max: usize,
    /// Frames shared with the previous sub-map.
    pub n_overlap: usize,
    pub mode: SyncMode,
    /// Assistant delay in seconds used when `mode` is async.
    pub async_offset: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            tau_flow: 25.0,
            n_max: 15,
            n_overlap: 3,
            mode: SyncMode::Sync,
            async_offset: 0.03,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), SubmapError> {
        if self.n_max == 0 {
            return Err(SubmapError::InvalidConfig("n_max must be positive".into()));
        }
        if self.n_overlap == 0 || self.n_overlap >= self.n_max {
            return Err(SubmapError::InvalidConfig("n_overlap must lie in [1, n_max)".into()));
        }
        if !(self.tau_flow >= 0.0) {
            return Err(SubmapError::InvalidConfig("tau_flow must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoopClosure {
    /// Keyframe of this sub-map at which the loop was detected.
    pub current: usize,
    /// Earlier keyframe it revisits.
    pub historical: usize,
}

/// Which frames a sub-map covers, before any estimation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubmapPlan {
    pub id: usize,
    /// Trailing primary frames of the previous sub-map (ascending).
    pub common: Vec<usize>,
    /// New keyframes (ascending).
    pub keyframes: Vec<usize>,
    /// Assistant frame associated with each entry of [`SubmapPlan::primary_ids`].
    pub assistant: Vec<usize>,
    pub loop_closure: Option<LoopClosure>,
}

impl SubmapPlan {
    /// Common frames followed by the new keyframes.
    pub fn primary_ids(&self) -> Vec<usize> {
        self.common.iter().chain(&self.keyframes).copied().collect()
    }
}

/// One estimated camera frame in sub-map-local coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameEstimate {
    pub frame: usize,
    /// Carries the frame timestamp.
    pub pose: Pose,
    pub depth: Option<DepthGrid>,
}

impl FrameEstimate {
    pub fn timestamp(&self) -> f64 {
        self.pose.timestamp.unwrap_or(f64::NAN)
    }
}

/// Output of the black-box reconstructor for one sub-map, plus the
/// quantities later stages attach to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Submap {
    pub id: usize,
    pub common: Vec<usize>,
    pub keyframes: Vec<usize>,
    /// Common frames then keyframes, ascending, local poses relative to the first.
    pub primary: Vec<FrameEstimate>,
    /// Assistant frames, ascending in time.
    pub assistant: Vec<FrameEstimate>,
    pub loop_closure: Option<LoopClosure>,
    /// Historical frame re-estimated inside this sub-map when a loop fired.
    pub loop_frame: Option<FrameEstimate>,
    pub intrinsics: Intrinsics,
    pub assistant_intrinsics: Intrinsics,
    /// Metric scale factor `s_k` (1 until scale alignment runs).
    pub scale: f64,
    /// `T_{k→w}`.
    pub to_world: Pose,
    /// Set when the sub-map yielded no usable rig spacing.
    pub degenerate: bool,
}

impl Submap {
    pub fn primary_ids(&self) -> Vec<usize> {
        self.primary.iter().map(|f| f.frame).collect()
    }

    /// Primary or loop frame with the given id.
    pub fn frame(&self, id: usize) -> Option<&FrameEstimate> {
        self.primary
            .iter()
            .find(|f| f.frame == id)
            .or_else(|| self.loop_frame.as_ref().filter(|f| f.frame == id))
    }

    /// All primary frames followed by the loop frame, if any.
    pub fn frames(&self) -> impl Iterator<Item = &FrameEstimate> {
        self.primary.iter().chain(self.loop_frame.iter())
    }

    pub fn local_pose(&self, id: usize) -> Option<Pose> {
        self.frame(id).map(|f| f.pose)
    }

    pub fn world_pose(&self, id: usize) -> Option<Pose> {
        self.local_pose(id).map(|p| {
            let t = p.timestamp;
            let mut w = self.to_world * p;
            w.timestamp = t;
            w
        })
    }

    /// Middle keyframe of the primary chain.
    pub fn central_frame(&self) -> &FrameEstimate {
        &self.primary[self.primary.len() / 2]
    }

    pub fn primary_poses(&self) -> Vec<Pose> {
        self.primary.iter().map(|f| f.pose).collect()
    }

    pub fn assistant_poses(&self) -> Vec<Pose> {
        self.assistant.iter().map(|f| f.pose).collect()
    }

    pub fn is_new_keyframe(&self, id: usize) -> bool {
        self.keyframes.binary_search(&id).is_ok()
    }
}

/// Plans sub-map `id` from its keyframes and the previous plan.
///
/// `primary_times[i]` / `assistant_times[j]` are the timestamps of primary
/// frame `i` / assistant frame `j`.
pub fn plan_submap(
    id: usize,
    keyframes: Vec<usize>,
    previous: Option<&SubmapPlan>,
    primary_times: &[f64],
    assistant_times: &[f64],
    cfg: &PipelineConfig,
) -> Result<SubmapPlan, SubmapError> {
    if keyframes.is_empty() {
        return Err(SubmapError::Empty(id));
    }
    let common = match previous {
        Some(p) => {
            let ids = p.primary_ids();
            let n = cfg.n_overlap.min(ids.len());
            ids[ids.len() - n..].to_vec()
        }
        None => Vec::new(),
    };
    let primary: Vec<(usize, f64)> = common
        .iter()
        .chain(&keyframes)
        .map(|&f| (f, primary_times[f]))
        .collect();
    let assistant_stream: Vec<(usize, f64)> = assistant_times.iter().copied().enumerate().collect();
    let assistant = associate_assistant(&primary, &assistant_stream, cfg.mode)?;
    Ok(SubmapPlan {
        id,
        common,
        keyframes,
        assistant,
        loop_closure: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn times(n: usize, offset: f64) -> Vec<f64> {
        (0..n).map(|i| i as f64 * 0.1 + offset).collect()
    }

    #[test]
    fn common_frames_are_tail_of_previous() {
        let cfg = PipelineConfig::default();
        let pt = times(100, 0.0);
        let a = plan_submap(0, vec![0, 3, 6, 9, 12], None, &pt, &pt, &cfg).unwrap();
        assert!(a.common.is_empty());
        let b = plan_submap(1, vec![15, 18], Some(&a), &pt, &pt, &cfg).unwrap();
        assert_eq!(b.common, vec![6, 9, 12]);
        assert_eq!(b.assistant, vec![6, 9, 12, 15, 18]);
        let c = plan_submap(2, vec![20], Some(&b), &pt, &pt, &cfg).unwrap();
        assert_eq!(c.common, vec![12, 15, 18]);
    }

    #[test]
    fn short_previous_gives_fewer_common_frames() {
        let cfg = PipelineConfig::default();
        let pt = times(10, 0.0);
        let a = plan_submap(0, vec![0, 1], None, &pt, &pt, &cfg).unwrap();
        let b = plan_submap(1, vec![2], Some(&a), &pt, &pt, &cfg).unwrap();
        assert_eq!(b.common, vec![0, 1]);
    }

    #[test]
    fn empty_keyframes_rejected() {
        let pt = times(10, 0.0);
        assert_eq!(
            plan_submap(4, vec![], None, &pt, &pt, &PipelineConfig::default()),
            Err(SubmapError::Empty(4))
        );
    }
}
