//! Minimal encoder classifier hosting the hierarchical embedding frontend and
//! the block-compressed attention memory.
//!
//! Tokens are embedded through per-layer tables mixed by layer attention
//! (or a single static table for the baseline), passed through
//! `attn_layers` residual single-head attention blocks, mean-pooled and
//! classified linearly. When a [`MemoryState`](crate::memory::MemoryState) is
//! supplied, every attention block reads block summaries (mean member state)
//! as keys and values while queries stay per token.

mod checkpoint;
mod controller;
mod forward;
mod params;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use controller::{MemoryConfig, MemoryController, MemoryEventRecord};
pub use forward::{ExampleLoss, Trace};
pub use params::Params;
pub use train::{evaluate, train_step, Evaluation, SgdMomentum};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::objectives::ObjectiveConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Embedding and attention width.
    pub d: usize,
    /// Hierarchy layers per token.
    #[serde(alias = "L")]
    pub layers: usize,
    pub heads: usize,
    pub attn_layers: usize,
    pub vocab: usize,
    pub classes: usize,
    pub use_memory: bool,
    /// `false` selects the static single-table embedding baseline.
    pub use_hierarchy: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 32,
            layers: 4,
            heads: 1,
            attn_layers: 2,
            vocab: 80,
            classes: 4,
            use_memory: true,
            use_hierarchy: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0
            || self.layers == 0
            || self.attn_layers == 0
            || self.vocab == 0
            || self.classes == 0
        {
            return Err(invalid("model dimensions must all be positive"));
        }
        if self.heads != 1 {
            return Err(invalid("only single-head attention is supported"));
        }
        Ok(())
    }

    /// Hierarchy depth actually used: the baseline always has one layer.
    pub fn effective_layers(&self) -> usize {
        if self.use_hierarchy {
            self.layers
        } else {
            1
        }
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        let (d, l, v, c) = (self.d, self.effective_layers(), self.vocab, self.classes);
        let hier = if self.use_hierarchy {
            2 * d * d + l * d + (l - 1) * (d * d + d)
        } else {
            0
        };
        l * v * d + hier + 4 * self.attn_layers * d * d + d * c + c
    }

    /// The static baseline whose width gives the closest parameter count to
    /// `self`.
    pub fn matched_baseline(&self) -> Self {
        let target = self.param_count() as i64;
        let mut best = Self {
            use_hierarchy: false,
            use_memory: false,
            ..*self
        };
        let mut best_gap = i64::MAX;
        for d in 1..=4 * self.d.max(1) + 64 {
            let cand = Self { d, ..best };
            let gap = (cand.param_count() as i64 - target).abs();
            if gap < best_gap {
                best_gap = gap;
                best = cand;
            }
        }
        best
    }
}

/// Fails unless the two configurations' parameter counts are within 10%.
pub fn check_matched_budget(a: &ModelConfig, b: &ModelConfig) -> Result<()> {
    let (pa, pb) = (a.param_count() as f64, b.param_count() as f64);
    let rel = (pa - pb).abs() / pa.max(pb);
    if rel > 0.10 {
        return Err(invalid(format!(
            "parameter budgets differ by {:.1}% ({} vs {})",
            rel * 100.0,
            a.param_count(),
            b.param_count()
        )));
    }
    Ok(())
}

/// Deterministic tally of attention work in a forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct OpCounter {
    /// Query-key score evaluations.
    pub scored_pairs: u64,
    pub mac_count: u64,
}

/// Score evaluations a forward pass performs: `attn_layers * T * T` without
/// memory, `attn_layers * T * B` with `B` memory blocks.
pub fn attention_op_count(tokens: usize, blocks: Option<usize>, attn_layers: usize) -> u64 {
    let keys = blocks.unwrap_or(tokens);
    (attn_layers * tokens * keys) as u64
}

/// A labelled token sequence with the segment it was drawn from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
    pub segment: usize,
}

/// The model: configuration plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
    pub objective: ObjectiveConfig,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            params: Params::init(&config),
            config,
            objective: ObjectiveConfig::default(),
        })
    }

    pub fn with_objective(mut self, objective: ObjectiveConfig) -> Self {
        self.objective = objective;
        self
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Rectifies the embedding rows of every distinct token in `tokens`
    /// toward the current layer transform. A no-op for single-layer models.
    pub fn rectify_tokens(&mut self, tokens: &[usize], eta: f64) -> Result<()> {
        if self.config.effective_layers() < 2 {
            return Ok(());
        }
        let distinct: std::collections::BTreeSet<usize> = tokens.iter().copied().collect();
        let distinct: Vec<usize> = distinct.into_iter().collect();
        let stacks = self.stacks(&distinct)?;
        let rectified = crate::memory::rectify(&stacks, &self.params.transform, eta)?;
        for (tok, stack) in distinct.iter().zip(&rectified) {
            self.params
                .embed
                .slice_mut(ndarray::s![.., *tok, ..])
                .assign(&stack.layers());
        }
        Ok(())
    }
}
