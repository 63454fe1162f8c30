//! Online test bank of fundamental matrices used to pick the global
//! intrinsics, and the damping factor derived from its fill level.

use std::collections::VecDeque;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::geometry::{essential_from_f, sorted_singular_values, FundamentalMatrix, Intrinsics};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SearchError {
    #[error("essential matrix is numerically zero")]
    ZeroEssential,
    #[error("the test bank is empty")]
    EmptyBank,
}

/// Bank sizing and group construction parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    /// Minimum qualified pairs per group.
    pub n_pair: usize,
    /// A pair qualifies with strictly more matches than this.
    pub n_feature: usize,
    /// Group capacity of the bank.
    pub n_group: usize,
    /// A group is attempted after every this many sub-maps.
    pub interval: usize,
    /// Pairs `(i, i + g)` for `g = 1..=pair_gap` over the recent keyframes.
    pub pair_gap: usize,
    /// Upper bound on pairs per group.
    pub max_pairs: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            n_pair: 10,
            n_feature: 10,
            n_group: 5,
            interval: 5,
            pair_gap: 3,
            max_pairs: 100,
        }
    }
}

/// `|σ1 − σ2| / σ1 + σ3 / σ1` for the singular values of `KᵀFK`.
pub fn score(k: &Intrinsics, f: &FundamentalMatrix) -> Result<f64, SearchError> {
    let e = essential_from_f(f, k);
    let sv = sorted_singular_values(&e);
    if !(sv[0] > f64::MIN_POSITIVE) || !sv[0].is_finite() {
        return Err(SearchError::ZeroEssential);
    }
    Ok((sv[0] - sv[1]).abs() / sv[0] + sv[2].abs() / sv[0])
}

/// Fundamental matrices estimated over one window of keyframe pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct TestGroup {
    pub matrices: Vec<FundamentalMatrix>,
    pub match_counts: Vec<usize>,
}

impl TestGroup {
    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }
}

/// Result of an attempt to add a group.
#[derive(Clone, Debug, PartialEq)]
pub enum GroupOutcome {
    Rejected { qualified: usize },
    Added { evicted: bool, global_changed: bool },
}

/// Bounded FIFO of test groups plus the candidate intrinsics history.
#[derive(Clone, Debug)]
pub struct TestBank {
    cfg: SearchConfig,
    groups: VecDeque<TestGroup>,
    candidates: Vec<Intrinsics>,
    k_global: Option<Intrinsics>,
    version: u64,
}

impl TestBank {
    pub fn new(cfg: SearchConfig) -> Self {
        TestBank {
            cfg,
            groups: VecDeque::new(),
            candidates: Vec::new(),
            k_global: None,
            version: 0,
        }
    }

    pub fn config(&self) -> &SearchConfig {
        &self.cfg
    }

    pub fn groups(&self) -> impl Iterator<Item = &TestGroup> {
        self.groups.iter()
    }

    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    pub fn candidates(&self) -> &[Intrinsics] {
        &self.candidates
    }

    pub fn k_global(&self) -> Option<Intrinsics> {
        self.k_global
    }

    /// Incremented whenever `K_global` changes.
    pub fn version(&self) -> u64 {
        self.version
    }

    /// Fundamental matrices currently stored, `N_total`.
    pub fn total_matrices(&self) -> usize {
        self.groups.iter().map(TestGroup::len).sum()
    }

    /// Mean score of `k` over every stored matrix.
    pub fn bank_score(&self, k: &Intrinsics) -> Result<f64, SearchError> {
        let n = self.total_matrices();
        if n == 0 {
            return Err(SearchError::EmptyBank);
        }
        let mut sum = 0.0;
        for g in &self.groups {
            for f in &g.matrices {
                sum += score(k, f)?;
            }
        }
        Ok(sum / n as f64)
    }

    fn score_or_inf(&self, k: &Intrinsics) -> f64 {
        self.bank_score(k).unwrap_or(f64::INFINITY)
    }

    fn set_global(&mut self, k: Intrinsics) -> bool {
        if self.k_global == Some(k) {
            return false;
        }
        self.k_global = Some(k);
        self.version += 1;
        true
    }

    /// Records a new estimate and keeps whichever of it and `K_global`
    /// scores lower. The first estimate initializes `K_global`. Returns
    /// whether `K_global` changed.
    pub fn propose_candidate(&mut self, k: Intrinsics) -> bool {
        if !self.candidates.contains(&k) {
            self.candidates.push(k);
        }
        let Some(current) = self.k_global else {
            return self.set_global(k);
        };
        if self.groups.is_empty() {
            return false;
        }
        if self.score_or_inf(&k) < self.score_or_inf(&current) {
            self.set_global(k)
        } else {
            false
        }
    }

    /// Adds a group built from `(F, match count)` pairs if enough pairs
    /// qualify, evicting the oldest group at capacity, then re-selects
    /// `K_global` over the whole candidate history.
    pub fn try_add_group(&mut self, pairs: Vec<(FundamentalMatrix, usize)>) -> GroupOutcome {
        let qualified: Vec<(FundamentalMatrix, usize)> = pairs
            .into_iter()
            .filter(|(_, n)| *n > self.cfg.n_feature)
            .take(self.cfg.max_pairs)
            .collect();
        if qualified.len() < self.cfg.n_pair {
            return GroupOutcome::Rejected {
                qualified: qualified.len(),
            };
        }
        let (matrices, match_counts) = qualified.into_iter().unzip();
        self.groups.push_back(TestGroup {
            matrices,
            match_counts,
        });
        let evicted = self.groups.len() > self.cfg.n_group;
        if evicted {
            self.groups.pop_front();
        }
        let global_changed = self.reselect();
        GroupOutcome::Added {
            evicted,
            global_changed,
        }
    }

    /// Re-scores every historical candidate; ties stay with the incumbent.
    fn reselect(&mut self) -> bool {
        let Some(mut best) = self.k_global else {
            return match self.candidates.first().copied() {
                Some(k) => self.set_global(k),
                None => false,
            };
        };
        let mut best_score = self.score_or_inf(&best);
        for c in &self.candidates {
            let s = self.score_or_inf(c);
            if s < best_score {
                best = *c;
                best_score = s;
            }
        }
        self.set_global(best)
    }

    /// `λ = clamp(⌊n̄ / (N_pair N_feature)⌋_0.1, 0, 1)` with `n̄ = N_total / N_group`.
    pub fn damping_factor(&self) -> f64 {
        damping_factor(self.total_matrices(), &self.cfg)
    }

    /// Writes per-group scores and the candidate table as CSV.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "section,index,size,fx,fy,cx,cy,score,is_global")?;
        let global = self.k_global;
        for (i, g) in self.groups.iter().enumerate() {
            let s = global
                .map(|k| {
                    let sum: f64 = g.matrices.iter().map(|f| score(&k, f).unwrap_or(f64::NAN)).sum();
                    sum / g.len() as f64
                })
                .unwrap_or(f64::NAN);
            writeln!(w, "group,{i},{},,,,,{s},", g.len())?;
        }
        for (i, k) in self.candidates.iter().enumerate() {
            let s = self.score_or_inf(k);
            let is_global = global == Some(*k);
            writeln!(
                w,
                "candidate,{i},,{},{},{},{},{s},{is_global}",
                k.fx, k.fy, k.cx, k.cy
            )?;
        }
        Ok(())
    }
}

/// Damping factor for a bank holding `total` matrices.
pub fn damping_factor(total: usize, cfg: &SearchConfig) -> f64 {
    if cfg.n_group == 0 || cfg.n_pair == 0 || cfg.n_feature == 0 {
        return 0.0;
    }
    let mean = total as f64 / cfg.n_group as f64;
    let ratio = mean / (cfg.n_pair * cfg.n_feature) as f64;
    // The epsilon keeps exact multiples such as 0.3 from flooring to 0.2.
    ((ratio * 10.0 + 1e-9).floor() / 10.0).clamp(0.0, 1.0)
}

/// Keyframe pairs `(a, b)` with `b` at most `gap` positions after `a`, in
/// order, truncated to `max_pairs`.
pub fn candidate_pairs(keyframes: &[usize], gap: usize, max_pairs: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..keyframes.len() {
        for g in 1..=gap {
            if i + g < keyframes.len() {
                out.push((keyframes[i], keyframes[i + g]));
            }
        }
    }
    out.truncate(max_pairs);
    out
}
