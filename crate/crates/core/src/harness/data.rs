//! Synthetic datasets: the topic-shift classification stream and small
//! random sets for memorisation and chance-level checks.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::Example;

/// Parameters of a stream of consecutive topics. Topic `s` owns the token
/// ids `s * P .. (s + 1) * P` with `P = vocab / segments`, and its own
/// token-to-class rule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShiftStreamSpec {
    pub segments: usize,
    pub tokens_per_segment: usize,
    /// Tokens per example; must divide `tokens_per_segment`.
    pub seq_len: usize,
    pub vocab: usize,
    pub classes: usize,
    /// Probability that a position is drawn from the label's own tokens
    /// rather than uniformly from the topic vocabulary.
    pub signal: f64,
    pub seed: u64,
}

impl Default for ShiftStreamSpec {
    fn default() -> Self {
        Self {
            segments: 10,
            tokens_per_segment: 640,
            seq_len: 16,
            vocab: 80,
            classes: 4,
            signal: 0.5,
            seed: 0,
        }
    }
}

impl ShiftStreamSpec {
    pub fn validate(&self) -> Result<()> {
        if self.segments == 0 || self.seq_len == 0 || self.classes == 0 {
            return Err(invalid("segments, seq_len and classes must be positive"));
        }
        if self.tokens_per_segment == 0 || !self.tokens_per_segment.is_multiple_of(self.seq_len) {
            return Err(invalid(
                "tokens_per_segment must be a positive multiple of seq_len",
            ));
        }
        if self.vocab / self.segments < self.classes {
            return Err(invalid(format!(
                "vocabulary of {} cannot give {} topics at least {} tokens each",
                self.vocab, self.segments, self.classes
            )));
        }
        if !(0.0..=1.0).contains(&self.signal) {
            return Err(invalid("signal must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn partition_size(&self) -> usize {
        self.vocab / self.segments
    }

    pub fn examples_per_segment(&self) -> usize {
        self.tokens_per_segment / self.seq_len
    }
}

/// One topic's vocabulary and its token-to-class rule.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Topic {
    pub vocab: Range<usize>,
    /// `token_class[i]` is the class of token `vocab.start + i`.
    pub token_class: Vec<usize>,
}

impl Topic {
    pub fn class_tokens(&self, class: usize) -> Vec<usize> {
        self.vocab
            .clone()
            .filter(|&t| self.token_class[t - self.vocab.start] == class)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ShiftDataset {
    pub examples: Vec<Example>,
    /// Token offsets where a new segment starts (excluding 0).
    pub boundaries: Vec<usize>,
    /// Example indices where a new segment starts (excluding 0).
    pub example_boundaries: Vec<usize>,
    pub topics: Vec<Topic>,
}

fn topics(spec: &ShiftStreamSpec) -> Vec<Topic> {
    let p = spec.partition_size();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.segments)
        .map(|s| {
            let mut order: Vec<usize> = (0..p).collect();
            order.shuffle(&mut rng);
            let mut token_class = vec![0; p];
            for (rank, &i) in order.iter().enumerate() {
                token_class[i] = rank % spec.classes;
            }
            Topic {
                vocab: s * p..(s + 1) * p,
                token_class,
            }
        })
        .collect()
}

/// The stream for `spec`, draw 0.
pub fn gen_shift_stream(spec: &ShiftStreamSpec) -> Result<ShiftDataset> {
    gen_shift_stream_draw(spec, 0)
}

/// Samples a stream. Topic rules depend only on `spec.seed`; `draw` selects
/// an independent sample of examples under the same rules, so draws serve
/// as train and held-out splits.
pub fn gen_shift_stream_draw(spec: &ShiftStreamSpec, draw: u64) -> Result<ShiftDataset> {
    spec.validate()?;
    let topics = topics(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(draw + 1);
    let per_segment = spec.examples_per_segment();
    let mut examples = Vec::with_capacity(per_segment * spec.segments);
    for (segment, topic) in topics.iter().enumerate() {
        let class_tokens: Vec<Vec<usize>> =
            (0..spec.classes).map(|c| topic.class_tokens(c)).collect();
        let mut labels: Vec<usize> = (0..per_segment).map(|i| i % spec.classes).collect();
        labels.shuffle(&mut rng);
        for label in labels {
            let tokens = (0..spec.seq_len)
                .map(|_| {
                    if rng.random_bool(spec.signal) {
                        class_tokens[label][rng.random_range(0..class_tokens[label].len())]
                    } else {
                        rng.random_range(topic.vocab.clone())
                    }
                })
                .collect();
            examples.push(Example {
                tokens,
                label,
                segment,
            });
        }
    }
    Ok(ShiftDataset {
        examples,
        boundaries: (1..spec.segments)
            .map(|s| s * spec.tokens_per_segment)
            .collect(),
        example_boundaries: (1..spec.segments).map(|s| s * per_segment).collect(),
        topics,
    })
}

/// `n` sequences of uniformly random tokens with labels cycling through the
/// classes, all in segment 0.
pub fn gen_random_set(
    n: usize,
    seq_len: usize,
    vocab: usize,
    classes: usize,
    seed: u64,
) -> Result<Vec<Example>> {
    if n == 0 || seq_len == 0 || vocab == 0 || classes == 0 {
        return Err(invalid("random set dimensions must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|i| Example {
            tokens: (0..seq_len).map(|_| rng.random_range(0..vocab)).collect(),
            label: i % classes,
            segment: 0,
        })
        .collect())
}
