use super::{PipelineConfig, SubmapError, SyncMode};

/// Streaming keyframe selector that emits batches of `n_max` keyframes.
#[derive(Clone, Debug)]
pub struct KeyframeSelector {
    tau_flow: f64,
    n_max: usize,
    cumulative: f64,
    started: bool,
    batch: Vec<usize>,
}

impl KeyframeSelector {
    pub fn new(cfg: &PipelineConfig) -> Self {
        KeyframeSelector {
            tau_flow: cfg.tau_flow,
            n_max: cfg.n_max.max(1),
            cumulative: 0.0,
            started: false,
            batch: Vec::new(),
        }
    }

    /// Feeds one frame with its disparity to the previous frame. Returns a
    /// completed batch when one fills up.
    pub fn push(&mut self, frame: usize, disparity: f64) -> Option<Vec<usize>> {
        let selected = if !self.started {
            self.started = true;
            true
        } else {
            self.cumulative += disparity;
            self.cumulative > self.tau_flow
        };
        if !selected {
            return None;
        }
        self.cumulative = 0.0;
        self.batch.push(frame);
        (self.batch.len() == self.n_max).then(|| std::mem::take(&mut self.batch))
    }

    /// Remaining partial batch, if any.
    pub fn finish(self) -> Option<Vec<usize>> {
        (!self.batch.is_empty()).then_some(self.batch)
    }
}

/// Splits a disparity stream (entry `i` is the disparity between frames
/// `i − 1` and `i`) into keyframe batches.
pub fn select_keyframes(disparities: &[f64], cfg: &PipelineConfig) -> Vec<Vec<usize>> {
    let mut sel = KeyframeSelector::new(cfg);
    let mut out: Vec<Vec<usize>> = disparities
        .iter()
        .enumerate()
        .filter_map(|(i, &d)| sel.push(i, d))
        .collect();
    out.extend(sel.finish());
    out
}

/// Pairs each primary frame `(id, time)` with an assistant frame.
///
/// Synchronized rigs require an identical timestamp. Asynchronous rigs take
/// the nearest unused assistant frame, in primary order, so every assistant
/// frame is used at most once; on equal distance the earlier one wins.
pub fn associate_assistant(
    primary: &[(usize, f64)],
    assistant: &[(usize, f64)],
    mode: SyncMode,
) -> Result<Vec<usize>, SubmapError> {
    let mut used = vec![false; assistant.len()];
    let mut out = Vec::with_capacity(primary.len());
    for &(frame, t) in primary {
        let idx = assistant.partition_point(|a| a.1 < t);
        let chosen = match mode {
            SyncMode::Sync => {
                let tol = 1e-9 * t.abs().max(1.0);
                [idx.checked_sub(1), Some(idx)]
                    .into_iter()
                    .flatten()
                    .filter(|&j| j < assistant.len())
                    .find(|&j| (assistant[j].1 - t).abs() <= tol)
                    .ok_or(SubmapError::NoExactMatch { frame, timestamp: t })?
            }
            SyncMode::Async => {
                let mut lo = idx.checked_sub(1);
                let mut hi = idx;
                while lo.is_some_and(|j| used[j]) {
                    lo = lo.and_then(|j| j.checked_sub(1));
                }
                while hi < assistant.len() && used[hi] {
                    hi += 1;
                }
                match (lo, hi < assistant.len()) {
                    (Some(l), true) => {
                        if t - assistant[l].1 <= assistant[hi].1 - t {
                            l
                        } else {
                            hi
                        }
                    }
                    (Some(l), false) => l,
                    (None, true) => hi,
                    (None, false) => return Err(SubmapError::AssistantExhausted(frame)),
                }
            }
        };
        used[chosen] = true;
        out.push(assistant[chosen].0);
    }
    Ok(out)
}
