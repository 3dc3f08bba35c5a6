//! Contextual shift detection on layer-weight statistics.

use std::collections::VecDeque;

use serde::Serialize;

use crate::error::{check_dim, invalid, Result};
use crate::hier_embed::AlphaWeights;

const SUM_TOLERANCE: f64 = 1e-9;

fn validate_distribution(p: &[f64], name: &str) -> Result<()> {
    if p.is_empty() {
        return Err(invalid(format!("{name} is empty")));
    }
    if p.iter().any(|&x| !x.is_finite() || x < 0.0) {
        return Err(invalid(format!(
            "{name} has negative or non-finite entries"
        )));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > SUM_TOLERANCE {
        return Err(invalid(format!("{name} sums to {total}")));
    }
    Ok(())
}

/// Jensen-Shannon divergence in nats, in `[0, ln 2]`.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    check_dim(p.len(), q.len())?;
    validate_distribution(p, "p")?;
    validate_distribution(q, "q")?;
    let mut total = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        if a > 0.0 {
            total += 0.5 * a * (a / m).ln();
        }
        if b > 0.0 {
            total += 0.5 * b * (b / m).ln();
        }
    }
    Ok(total.clamp(0.0, std::f64::consts::LN_2))
}

/// A detected change in the layer-weight distribution.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ShiftEvent {
    /// Number of samples seen when the event fired (1-based).
    pub sample: u64,
    pub divergence: f64,
}

/// Sliding-window detector over per-token layer weights.
///
/// `current_hist` is the mean of the last `window` samples. The reference is
/// the first full window; from `2 * window` samples on, an event fires when the
/// divergence between reference and current exceeds the threshold, and the
/// reference then moves to the current window.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftDetectorState {
    window: usize,
    threshold: f64,
    reference_hist: Vec<f64>,
    current_hist: Vec<f64>,
    samples_seen: u64,
    recent: VecDeque<Vec<f64>>,
    last_divergence: f64,
}

impl ShiftDetectorState {
    pub fn new(num_layers: usize, window: usize, threshold: f64) -> Result<Self> {
        if num_layers == 0 {
            return Err(invalid("detector needs at least one layer"));
        }
        if window == 0 {
            return Err(invalid("detector window must be at least 1"));
        }
        if !(threshold > 0.0 && threshold <= std::f64::consts::LN_2) {
            return Err(invalid(format!("threshold {threshold} outside (0, ln 2]")));
        }
        let uniform = vec![1.0 / num_layers as f64; num_layers];
        Ok(Self {
            window,
            threshold,
            reference_hist: uniform.clone(),
            current_hist: uniform,
            samples_seen: 0,
            recent: VecDeque::with_capacity(window),
            last_divergence: 0.0,
        })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn samples_seen(&self) -> u64 {
        self.samples_seen
    }

    pub fn reference_hist(&self) -> &[f64] {
        &self.reference_hist
    }

    pub fn current_hist(&self) -> &[f64] {
        &self.current_hist
    }

    /// Divergence computed on the most recent post-warm-up sample.
    pub fn last_divergence(&self) -> f64 {
        self.last_divergence
    }

    /// Feeds one sample; returns an event if a shift is detected.
    pub fn observe(&mut self, alpha: &AlphaWeights) -> Result<Option<ShiftEvent>> {
        self.observe_slice(alpha.as_slice())
    }

    pub fn observe_slice(&mut self, sample: &[f64]) -> Result<Option<ShiftEvent>> {
        check_dim(self.current_hist.len(), sample.len())?;
        if self.recent.len() == self.window {
            self.recent.pop_front();
        }
        self.recent.push_back(sample.to_vec());
        self.samples_seen += 1;

        let count = self.recent.len() as f64;
        for (l, c) in self.current_hist.iter_mut().enumerate() {
            *c = self.recent.iter().map(|s| s[l]).sum::<f64>() / count;
        }

        let w = self.window as u64;
        if self.samples_seen <= w {
            self.reference_hist.clone_from(&self.current_hist);
            return Ok(None);
        }
        if self.samples_seen < 2 * w {
            return Ok(None);
        }
        let divergence = js_divergence(&self.reference_hist, &self.current_hist)?;
        self.last_divergence = divergence;
        if divergence > self.threshold {
            self.reference_hist.clone_from(&self.current_hist);
            Ok(Some(ShiftEvent {
                sample: self.samples_seen,
                divergence,
            }))
        } else {
            Ok(None)
        }
    }
}
