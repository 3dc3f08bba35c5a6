//! Runtime owner of the attention memory: decides when to re-cluster, feeds
//! the shift detector and trains the reallocation policy.

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Model, Trace};
use crate::error::{invalid, Result};
use crate::memory::{
    cluster_tokens, Action, MemoryState, ReallocPolicy, ShiftDetectorState, ShiftEvent,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemoryConfig {
    /// Maximum number of blocks.
    pub capacity: usize,
    /// Cosine-distance merge threshold for clustering.
    pub theta: f64,
    /// Shift threshold in nats.
    pub tau: f64,
    /// Detector window in token samples.
    #[serde(rename = "W")]
    pub window: usize,
    /// Rectification rate applied on shift events during training.
    pub eta: f64,
    /// Re-clustering cadence in steps.
    #[serde(rename = "R")]
    pub recluster_every: u64,
    pub policy_lr: f64,
    /// Weight `c` of the block-count penalty in the policy reward.
    pub cost_weight: f64,
    /// Steps after an action over which its reward is measured.
    pub reward_horizon: usize,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            capacity: 8,
            theta: 0.6,
            tau: 0.05,
            window: 32,
            eta: 0.1,
            recluster_every: 64,
            policy_lr: 0.1,
            cost_weight: 0.1,
            reward_horizon: 8,
        }
    }
}

impl MemoryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.capacity == 0
            || self.window == 0
            || self.recluster_every == 0
            || self.reward_horizon == 0
        {
            return Err(invalid(
                "memory capacity, W, R and reward_horizon must be positive",
            ));
        }
        if !(0.0..=2.0).contains(&self.theta) {
            return Err(invalid("theta must lie in [0, 2]"));
        }
        if !(self.tau > 0.0 && self.tau <= std::f64::consts::LN_2) {
            return Err(invalid("tau must lie in (0, ln 2]"));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(invalid("eta must lie in (0, 1]"));
        }
        if !(self.policy_lr > 0.0 && self.cost_weight >= 0.0) {
            return Err(invalid(
                "policy_lr must be positive and cost_weight nonnegative",
            ));
        }
        Ok(())
    }
}

/// One reallocation decision, logged once its reward is known.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MemoryEventRecord {
    pub step: u64,
    pub divergence: f64,
    pub action: Action,
    pub block_count: usize,
    pub reward: f64,
}

#[derive(Clone, Debug)]
struct OpenAction {
    step: u64,
    divergence: f64,
    action: Action,
    block_count: usize,
    loss_before: f64,
    losses_after: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct MemoryController {
    config: MemoryConfig,
    memory: Option<MemoryState>,
    detector: ShiftDetectorState,
    policy: ReallocPolicy,
    rng: ChaCha8Rng,
    step: u64,
    recluster_pending: bool,
    queued: Option<(u64, f64, Action)>,
    open: Option<OpenAction>,
    recent_losses: VecDeque<f64>,
    records: Vec<MemoryEventRecord>,
    shifts: u64,
    reclusters: u64,
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values
        .into_iter()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

impl MemoryController {
    pub fn new(config: MemoryConfig, num_layers: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            detector: ShiftDetectorState::new(num_layers, config.window, config.tau)?,
            policy: ReallocPolicy::new(config.policy_lr)?,
            rng: ChaCha8Rng::seed_from_u64(seed),
            config,
            memory: None,
            step: 0,
            recluster_pending: false,
            queued: None,
            open: None,
            recent_losses: VecDeque::new(),
            records: Vec::new(),
            shifts: 0,
            reclusters: 0,
        })
    }

    pub fn config(&self) -> &MemoryConfig {
        &self.config
    }

    pub fn memory(&self) -> Option<&MemoryState> {
        self.memory.as_ref()
    }

    pub fn policy(&self) -> &ReallocPolicy {
        &self.policy
    }

    pub fn records(&self) -> &[MemoryEventRecord] {
        &self.records
    }

    pub fn shift_count(&self) -> u64 {
        self.shifts
    }

    pub fn recluster_count(&self) -> u64 {
        self.reclusters
    }

    /// Builds the memory from `tokens` when there is none yet, on the
    /// re-clustering cadence, and after a shift.
    pub fn prepare(&mut self, model: &Model, tokens: &[usize]) -> Result<()> {
        let scheduled = self.step > 0 && self.step.is_multiple_of(self.config.recluster_every);
        if !(self.memory.is_none() || scheduled || self.recluster_pending) {
            return Ok(());
        }
        let (embeddings, _) = model.embed(tokens)?;
        let mut memory = cluster_tokens(embeddings.view(), self.config.theta)?;
        memory.set_capacity(self.config.capacity)?;
        self.reclusters += 1;
        self.recluster_pending = false;

        if let Some((step, divergence, action)) = self.queued.take() {
            memory.apply_action(action);
            self.open = Some(OpenAction {
                step,
                divergence,
                action,
                block_count: memory.len(),
                loss_before: mean(self.recent_losses.iter().copied()),
                losses_after: Vec::new(),
            });
        }
        self.memory = Some(memory);
        Ok(())
    }

    /// Records the outcome of a step run against the current memory.
    /// Returns the shift event if one fired.
    pub fn observe(&mut self, trace: &Trace, task_loss: f64) -> Result<Option<ShiftEvent>> {
        self.step += 1;
        if let Some(m) = &mut self.memory {
            m.record_usage(&trace.block_mass);
        }
        let mut event = None;
        for alpha in &trace.alphas {
            if let Some(e) = self.detector.observe(alpha)? {
                event.get_or_insert(e);
            }
        }

        if let Some(open) = &mut self.open {
            open.losses_after.push(task_loss);
            if open.losses_after.len() >= self.config.reward_horizon {
                self.resolve()?;
            }
        }
        self.recent_losses.push_back(task_loss);
        if self.recent_losses.len() > self.config.reward_horizon {
            self.recent_losses.pop_front();
        }

        if let Some(e) = &event {
            self.shifts += 1;
            if self.open.is_some() {
                self.resolve()?;
            }
            let action = self.policy.sample_action(&mut self.rng);
            self.queued = Some((self.step, e.divergence, action));
            self.recluster_pending = true;
        }
        Ok(event)
    }

    fn resolve(&mut self) -> Result<()> {
        let Some(open) = self.open.take() else {
            return Ok(());
        };
        let improvement = if open.losses_after.is_empty() {
            0.0
        } else {
            open.loss_before - mean(open.losses_after.iter().copied())
        };
        let reward = improvement
            - self.config.cost_weight * open.block_count as f64 / self.config.capacity as f64;
        self.policy.step(reward, open.action)?;
        self.records.push(MemoryEventRecord {
            step: open.step,
            divergence: open.divergence,
            action: open.action,
            block_count: open.block_count,
            reward,
        });
        Ok(())
    }

    /// Settles any action still waiting for its reward.
    pub fn finish(&mut self) -> Result<()> {
        self.resolve()
    }
}
