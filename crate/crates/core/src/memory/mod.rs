//! Structural attention memory.
//!
//! Token states are grouped into shared blocks; attention then reads block
//! summaries instead of individual positions. The structure is kept up to date
//! by a layer-weight shift detector and a small REINFORCE policy choosing
//! between retaining, merging and evicting blocks. Alignment between
//! hierarchy layers is audited and pulled back toward the layer transform.

mod alignment;
mod cluster;
mod policy;
mod shift;

pub use alignment::{alignment_audit, rectify, AlignmentReport, GapDiscrepancy};
pub use cluster::{cluster_tokens, cosine_distance};
pub use policy::{Action, ReallocPolicy};
pub use shift::{js_divergence, ShiftDetectorState, ShiftEvent};

use std::collections::BTreeSet;

use ndarray::{Array1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryBlock {
    pub block_id: usize,
    pub centroid: Array1<f64>,
    pub member_tokens: BTreeSet<usize>,
    pub last_used_step: u64,
    pub usage_count: u64,
}

impl MemoryBlock {
    pub fn member_count(&self) -> usize {
        self.member_tokens.len()
    }

    /// Smallest member index; blocks are ordered by it after clustering.
    pub fn first_member(&self) -> usize {
        *self
            .member_tokens
            .iter()
            .next()
            .expect("blocks are nonempty")
    }
}

/// The set of shared blocks standing in for per-token attention slots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryState {
    blocks: Vec<MemoryBlock>,
    capacity: usize,
    step: u64,
}

/// Result of [`MemoryState::apply_action`].
#[derive(Clone, Debug, PartialEq)]
pub struct ActionOutcome {
    pub action: Action,
    /// The action could not be carried out (too few blocks) and was a no-op.
    pub degenerate: bool,
    pub merged: Option<(usize, usize)>,
    pub evicted: Option<MemoryBlock>,
}

impl MemoryState {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(invalid("memory capacity must be at least 1"));
        }
        Ok(Self {
            blocks: Vec::new(),
            capacity,
            step: 0,
        })
    }

    /// Builds a state from explicit blocks, checking every invariant.
    pub fn from_blocks(blocks: Vec<MemoryBlock>, capacity: usize, step: u64) -> Result<Self> {
        let mut state = Self::new(capacity)?;
        state.step = step;
        if blocks.len() > capacity {
            return Err(invalid(format!(
                "{} blocks exceed capacity {capacity}",
                blocks.len()
            )));
        }
        let mut ids = BTreeSet::new();
        let mut seen = BTreeSet::new();
        for b in &blocks {
            if b.member_tokens.is_empty() {
                return Err(invalid(format!("block {} has no members", b.block_id)));
            }
            if !ids.insert(b.block_id) {
                return Err(invalid(format!("duplicate block id {}", b.block_id)));
            }
            if b.centroid.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("block centroid"));
            }
            for &t in &b.member_tokens {
                if !seen.insert(t) {
                    return Err(invalid(format!("token {t} appears in more than one block")));
                }
            }
        }
        state.blocks = blocks;
        state.blocks.sort_by_key(|b| b.block_id);
        Ok(state)
    }

    /// Blocks from an explicit grouping of the rows of `vectors`, with
    /// mean centroids. Block ids follow the group order.
    pub fn from_partition(
        groups: &[Vec<usize>],
        vectors: ArrayView2<f64>,
        capacity: usize,
    ) -> Result<Self> {
        let blocks = groups
            .iter()
            .enumerate()
            .map(|(id, members)| {
                if members.iter().any(|&m| m >= vectors.nrows()) {
                    return Err(invalid("group member out of range"));
                }
                let rows: Vec<_> = members.iter().map(|&m| vectors.row(m).to_owned()).collect();
                Ok(MemoryBlock {
                    block_id: id,
                    centroid: block_summary(&rows)?,
                    member_tokens: members.iter().copied().collect(),
                    last_used_step: 0,
                    usage_count: 0,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_blocks(blocks, capacity, 0)
    }

    /// `num_blocks` contiguous, near-equal runs of positions `0..num_tokens`.
    pub fn contiguous(vectors: ArrayView2<f64>, num_blocks: usize) -> Result<Self> {
        let n = vectors.nrows();
        if num_blocks == 0 || num_blocks > n {
            return Err(invalid(format!(
                "cannot split {n} tokens into {num_blocks} blocks"
            )));
        }
        let groups: Vec<Vec<usize>> = (0..num_blocks)
            .map(|b| (b * n / num_blocks..(b + 1) * n / num_blocks).collect())
            .collect();
        Self::from_partition(&groups, vectors, num_blocks)
    }

    pub fn blocks(&self) -> &[MemoryBlock] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn total_members(&self) -> usize {
        self.blocks.iter().map(MemoryBlock::member_count).sum()
    }

    pub fn set_capacity(&mut self, capacity: usize) -> Result<()> {
        if capacity == 0 {
            return Err(invalid("memory capacity must be at least 1"));
        }
        self.capacity = capacity;
        self.enforce_capacity();
        Ok(())
    }

    /// Merges closest blocks until the state fits its capacity.
    pub fn enforce_capacity(&mut self) {
        while self.blocks.len() > self.capacity {
            self.merge_closest();
        }
    }

    /// Advances the clock and marks blocks whose attention mass is at least
    /// the uniform share as used.
    pub fn record_usage(&mut self, block_mass: &[f64]) {
        self.step += 1;
        if self.blocks.is_empty() {
            return;
        }
        let fair = 1.0 / self.blocks.len() as f64;
        for (b, &m) in self.blocks.iter_mut().zip(block_mass) {
            if m >= fair {
                b.last_used_step = self.step;
                b.usage_count += 1;
            }
        }
    }

    /// Applies one reallocation action and advances the clock.
    pub fn apply_action(&mut self, action: Action) -> ActionOutcome {
        self.step += 1;
        let mut outcome = ActionOutcome {
            action,
            degenerate: false,
            merged: None,
            evicted: None,
        };
        match action {
            Action::Retain => {}
            Action::Merge if self.blocks.len() < 2 => outcome.degenerate = true,
            Action::Merge => outcome.merged = Some(self.merge_closest()),
            Action::Evict if self.blocks.is_empty() => outcome.degenerate = true,
            Action::Evict => {
                let (idx, _) = self
                    .blocks
                    .iter()
                    .enumerate()
                    .min_by_key(|(_, b)| (b.last_used_step, b.block_id))
                    .expect("nonempty");
                outcome.evicted = Some(self.blocks.remove(idx));
            }
        }
        outcome
    }

    /// Merges the pair of blocks whose centroids are closest in cosine
    /// distance; ties go to the lowest pair of block ids. Returns the ids.
    fn merge_closest(&mut self) -> (usize, usize) {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..self.blocks.len() {
            for j in i + 1..self.blocks.len() {
                let d = centroid_distance(&self.blocks[i].centroid, &self.blocks[j].centroid);
                if best.is_none_or(|(bd, _, _)| d < bd) {
                    best = Some((d, i, j));
                }
            }
        }
        let (_, i, j) = best.expect("at least two blocks");
        let b = self.blocks.remove(j);
        let a = &mut self.blocks[i];
        let (na, nb) = (a.member_count() as f64, b.member_count() as f64);
        a.centroid = (&a.centroid * na + &b.centroid * nb) / (na + nb);
        a.member_tokens.extend(b.member_tokens);
        a.last_used_step = a.last_used_step.max(b.last_used_step);
        a.usage_count += b.usage_count;
        (a.block_id, b.block_id)
    }

    /// Block index for each position `0..n` (`None` if unrepresented).
    pub fn assignment(&self, n: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; n];
        for (bi, b) in self.blocks.iter().enumerate() {
            for &t in &b.member_tokens {
                if t < n {
                    out[t] = Some(bi);
                }
            }
        }
        out
    }
}

/// Cosine distance between centroids; a zero centroid counts as orthogonal.
fn centroid_distance(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    cosine_distance(a.view(), b.view()).unwrap_or(1.0)
}

/// Arithmetic mean of the member vectors.
pub fn block_summary(members: &[Array1<f64>]) -> Result<Array1<f64>> {
    let first = members
        .first()
        .ok_or_else(|| invalid("a block needs at least one member"))?;
    let mut sum = Array1::zeros(first.len());
    for m in members {
        crate::error::check_dim(first.len(), m.len())?;
        sum += m;
    }
    Ok(sum / members.len() as f64)
}
