//! Sequence-length sweep of forward passes with and without memory.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::CsvRow;
use crate::error::{invalid, Result};
use crate::memory::MemoryState;
use crate::model::{Model, ModelConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    /// Ascending sequence lengths.
    pub lengths: Vec<usize>,
    pub repetitions: usize,
    /// Blocks per token in the memory variant: `B = ceil(fraction * T)`.
    pub block_fraction: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            lengths: vec![16, 32, 64, 128, 256],
            repetitions: 20,
            block_fraction: 0.55,
        }
    }
}

pub const MIN_REPETITIONS: usize = 20;

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lengths.is_empty()
            || self.lengths[0] == 0
            || self.lengths.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(invalid(
                "lengths must be nonempty, ascending and at least 1",
            ));
        }
        if self.repetitions < MIN_REPETITIONS {
            return Err(invalid(format!(
                "repetitions must be at least {MIN_REPETITIONS}"
            )));
        }
        if !(self.block_fraction > 0.0 && self.block_fraction <= 1.0) {
            return Err(invalid("block_fraction must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn blocks_for(&self, length: usize) -> usize {
        ((self.block_fraction * length as f64).ceil() as usize).clamp(1, length)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    /// `dense` or `memory`.
    pub variant: &'static str,
    pub length: usize,
    /// Memory blocks, 0 for the dense variant.
    pub blocks: usize,
    /// Median wall-clock time of one forward pass.
    pub wall_ms: f64,
    pub scored_pairs: u64,
}

impl CsvRow for BenchRow {
    const HEADER: &'static [&'static str] =
        &["variant", "length", "blocks", "wall_ms", "scored_pairs"];
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Times forward passes over random sequences of each length, dense and
/// with a contiguous block memory.
pub fn bench_lengths(
    model_config: &ModelConfig,
    bench: &BenchConfig,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    bench.validate()?;
    let model = Model::new(*model_config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(2 * bench.lengths.len());
    for &length in &bench.lengths {
        let tokens: Vec<usize> = (0..length)
            .map(|_| rng.random_range(0..model_config.vocab))
            .collect();
        let blocks = bench.blocks_for(length);
        let (embeddings, _) = model.embed(&tokens)?;
        let memory = MemoryState::contiguous(embeddings.view(), blocks)?;
        for (variant, mem) in [("dense", None), ("memory", Some(&memory))] {
            let mut times = Vec::with_capacity(bench.repetitions);
            let mut scored_pairs = 0;
            for _ in 0..bench.repetitions {
                let start = Instant::now();
                let (_, trace) = model.forward(&tokens, mem)?;
                times.push(start.elapsed().as_secs_f64() * 1e3);
                scored_pairs = trace.counter.scored_pairs;
            }
            rows.push(BenchRow {
                variant,
                length,
                blocks: mem.map_or(0, |m| m.len()),
                wall_ms: median(times),
                scored_pairs,
            });
        }
    }
    Ok(rows)
}
