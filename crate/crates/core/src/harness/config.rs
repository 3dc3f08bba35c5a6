//! Run configuration: strict JSON with line-numbered diagnostics.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::bench::BenchConfig;
use super::data::ShiftStreamSpec;
use crate::error::{Error, Result};
use crate::hier_embed::LayerAttention;
use crate::model::{MemoryConfig, ModelConfig};
use crate::objectives::{EmbedLossConfig, LossWeights, ObjectiveConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    ShiftClassify,
    LengthBench,
    Overfit,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::ShiftClassify => "shift_classify",
            Task::LengthBench => "length_bench",
            Task::Overfit => "overfit",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    /// Full-batch steps for the overfit task.
    pub steps: usize,
    /// Passes over the stream for the shift task.
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    /// Size and sequence length of the overfit memorisation set.
    pub overfit_examples: usize,
    pub overfit_seq_len: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            epochs: 10,
            lr: 0.01,
            momentum: 0.9,
            batch_size: 8,
            seeds: vec![0, 1, 2, 3, 4],
            overfit_examples: 8,
            overfit_seq_len: 8,
        }
    }
}

/// Auxiliary objective settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveSettings {
    pub weights: LossWeights,
    pub embed: EmbedLossConfig,
    /// Layer-attention softmax temperature.
    pub temperature: f64,
}

impl Default for ObjectiveSettings {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            embed: EmbedLossConfig::default(),
            temperature: 1.0,
        }
    }
}

impl ObjectiveSettings {
    pub fn build(&self) -> Result<ObjectiveConfig> {
        self.weights.validate()?;
        self.embed.validate()?;
        Ok(ObjectiveConfig {
            embed: self.embed,
            weights: self.weights,
            attention: LayerAttention::new(self.temperature)?,
        })
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub memory: MemoryConfig,
    #[serde(default)]
    pub objective: ObjectiveSettings,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub stream: ShiftStreamSpec,
    #[serde(default)]
    pub bench: BenchConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn new(task: Task) -> Self {
        Self {
            task,
            model: ModelConfig::default(),
            memory: MemoryConfig::default(),
            objective: ObjectiveSettings::default(),
            training: TrainingConfig::default(),
            stream: ShiftStreamSpec::default(),
            bench: BenchConfig::default(),
            output_dir: default_output_dir(),
        }
    }

    /// Semantic checks. On failure returns the JSON key to blame and a
    /// message.
    pub fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        let wrap = |key: &'static str| move |e: Error| (key, e.to_string());
        self.model.validate().map_err(wrap("model"))?;
        self.memory.validate().map_err(wrap("memory"))?;
        self.objective.build().map_err(wrap("objective"))?;
        self.stream.validate().map_err(wrap("stream"))?;
        self.bench.validate().map_err(wrap("bench"))?;
        let t = &self.training;
        if !(t.lr.is_finite() && t.lr >= 0.0) {
            return Err(("lr", "lr must be finite and nonnegative".into()));
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return Err(("momentum", "momentum must lie in [0, 1)".into()));
        }
        if t.steps == 0
            || t.epochs == 0
            || t.batch_size == 0
            || t.overfit_examples == 0
            || t.overfit_seq_len == 0
        {
            return Err((
                "training",
                "steps, epochs, batch_size and overfit sizes must be positive".into(),
            ));
        }
        if t.seeds.is_empty() || t.seeds.iter().collect::<BTreeSet<_>>().len() != t.seeds.len() {
            return Err((
                "seeds",
                "seeds must be a nonempty list without repeats".into(),
            ));
        }
        if self.task == Task::ShiftClassify {
            if self.model.vocab < self.stream.vocab {
                return Err((
                    "vocab",
                    "model vocab is smaller than the stream vocab".into(),
                ));
            }
            if self.model.classes != self.stream.classes {
                return Err(("classes", "model and stream class counts differ".into()));
            }
        }
        Ok(())
    }
}

/// 1-based line of the first occurrence of `"key"` in `text`, or 1.
fn locate(text: &str, key: &str) -> usize {
    let quoted = format!("\"{key}\"");
    text.lines()
        .position(|l| l.contains(&quoted))
        .map_or(1, |i| i + 1)
}

/// Parses and validates a config, reporting the offending line on error.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config {
        line: e.line().max(1),
        message: e.to_string(),
    })?;
    cfg.check().map_err(|(key, message)| Error::Config {
        line: locate(text, key),
        message,
    })?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}
