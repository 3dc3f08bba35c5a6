//! Three-action REINFORCE policy over memory reallocation moves.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::hier_embed::softmax;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Retain,
    Merge,
    Evict,
}

impl Action {
    pub const ALL: [Action; 3] = [Action::Retain, Action::Merge, Action::Evict];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Action::Retain => "retain",
            Action::Merge => "merge",
            Action::Evict => "evict",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReallocPolicy {
    logits: [f64; 3],
    baseline: f64,
    learning_rate: f64,
}

impl ReallocPolicy {
    /// Decay of the reward baseline's moving average.
    pub const BASELINE_DECAY: f64 = 0.9;

    pub fn new(learning_rate: f64) -> Result<Self> {
        Self::with_logits([0.0; 3], learning_rate)
    }

    pub fn with_logits(logits: [f64; 3], learning_rate: f64) -> Result<Self> {
        if !(learning_rate.is_finite() && learning_rate > 0.0) {
            return Err(invalid("policy learning rate must be positive"));
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(invalid("policy logits must be finite"));
        }
        Ok(Self {
            logits,
            baseline: 0.0,
            learning_rate,
        })
    }

    pub fn logits(&self) -> [f64; 3] {
        self.logits
    }

    pub fn baseline(&self) -> f64 {
        self.baseline
    }

    pub fn probabilities(&self) -> [f64; 3] {
        let p = softmax(ndarray::ArrayView1::from(&self.logits));
        [p[0], p[1], p[2]]
    }

    pub fn probability(&self, action: Action) -> f64 {
        self.probabilities()[action.index()]
    }

    pub fn sample_action<R: Rng + ?Sized>(&self, rng: &mut R) -> Action {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (a, p) in Action::ALL.iter().zip(self.probabilities()) {
            acc += p;
            if u < acc {
                return *a;
            }
        }
        Action::Evict
    }

    /// Score-function update with the running-mean reward as baseline.
    pub fn step(&mut self, reward: f64, taken: Action) -> Result<()> {
        if !reward.is_finite() {
            return Err(invalid("reward must be finite"));
        }
        let advantage = reward - self.baseline;
        let probs = self.probabilities();
        for (i, l) in self.logits.iter_mut().enumerate() {
            let indicator = if i == taken.index() { 1.0 } else { 0.0 };
            *l += self.learning_rate * advantage * (indicator - probs[i]);
        }
        self.baseline =
            Self::BASELINE_DECAY * self.baseline + (1.0 - Self::BASELINE_DECAY) * reward;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_advantage_leaves_logits() {
        let mut p = ReallocPolicy::with_logits([0.3, -0.1, 0.2], 0.5).unwrap();
        let before = p.logits();
        p.step(0.0, Action::Merge).unwrap();
        assert_eq!(p.logits(), before);
    }

    #[test]
    fn positive_advantage_raises_probability() {
        let mut p = ReallocPolicy::new(0.1).unwrap();
        let mut prev = p.probability(Action::Retain);
        for _ in 0..20 {
            // Reward stays above the moving baseline, so advantage is positive.
            p.step(1.0, Action::Retain).unwrap();
            let now = p.probability(Action::Retain);
            assert!(now > prev);
            prev = now;
        }
    }

    #[test]
    fn saturated_logits_pick_retain() {
        let p = ReallocPolicy::with_logits([100.0, -100.0, -100.0], 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let hits = (0..10_000)
            .filter(|_| p.sample_action(&mut rng) == Action::Retain)
            .count();
        assert!(hits as f64 / 10_000.0 > 0.999);
    }

    #[test]
    fn equal_logits_are_uniform() {
        let p = ReallocPolicy::new(0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = [0usize; 3];
        for _ in 0..10_000 {
            counts[p.sample_action(&mut rng).index()] += 1;
        }
        for c in counts {
            assert!((c as f64 / 10_000.0 - 1.0 / 3.0).abs() < 0.02);
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let p = ReallocPolicy::with_logits([0.5, 0.1, -0.4], 0.1).unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..100)
                .map(|_| p.sample_action(&mut rng))
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(42), draw(42));
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(ReallocPolicy::new(0.0).is_err());
        assert!(ReallocPolicy::with_logits([f64::NAN, 0.0, 0.0], 0.1).is_err());
        assert!(ReallocPolicy::new(0.1)
            .unwrap()
            .step(f64::INFINITY, Action::Retain)
            .is_err());
    }
}
