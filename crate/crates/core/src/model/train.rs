use ndarray::Array1;
use serde::Serialize;

use super::{Example, ExampleLoss, MemoryController, Model, Params, Trace};
use crate::error::{invalid, Error, Result};
use crate::memory::MemoryState;
use crate::parallel::{ordered_sum, Exec};

/// Stochastic gradient descent with heavy-ball momentum.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: Option<Params>,
}

impl Default for SgdMomentum {
    fn default() -> Self {
        Self::new(0.01, 0.9)
    }
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: None,
        }
    }

    /// `v <- momentum * v + g; params <- params - lr * v`.
    pub fn apply(&mut self, params: &mut Params, grads: &Params) {
        let velocity = self.velocity.get_or_insert_with(|| params.zeros_like());
        velocity.scale(self.momentum);
        velocity.add_scaled(1.0, grads);
        params.add_scaled(-self.lr, velocity);
    }
}

fn mean_loss(losses: &[ExampleLoss]) -> ExampleLoss {
    let n = losses.len() as f64;
    let avg =
        |f: fn(&ExampleLoss) -> f64| ordered_sum(&losses.iter().map(f).collect::<Vec<_>>()) / n;
    ExampleLoss {
        task: avg(|l| l.task),
        embed: avg(|l| l.embed),
        hier: avg(|l| l.hier),
        total: avg(|l| l.total),
    }
}

/// One optimiser step on the mean loss of `batch`. Returns the pre-step
/// mean loss and each example's trace.
pub fn train_step(
    model: &mut Model,
    batch: &[Example],
    optimizer: &mut SgdMomentum,
    memory: Option<&MemoryState>,
    exec: Exec,
) -> Result<(ExampleLoss, Vec<Trace>)> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    let results = {
        let m: &Model = model;
        exec.map(batch, |ex| m.loss_and_grad(ex, memory))
    };
    let mut losses = Vec::with_capacity(batch.len());
    let mut traces = Vec::with_capacity(batch.len());
    let mut grads = model.params.zeros_like();
    for r in results {
        let (loss, g, trace) = r?;
        grads.add_scaled(1.0 / batch.len() as f64, &g);
        losses.push(loss);
        traces.push(trace);
    }
    let loss = mean_loss(&losses);
    if !loss.total.is_finite() || !grads.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    optimizer.apply(&mut model.params, &grads);
    Ok((loss, traces))
}

/// Accuracy and loss over a dataset.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// One entry per segment index `0..segments`; `NaN` for empty segments.
    pub per_segment: Vec<f64>,
    pub mean_loss: f64,
    pub mean_task_loss: f64,
}

fn argmax(v: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Evaluates `model` on `examples`. With a controller the examples are
/// streamed in order through the adaptive memory; otherwise they are
/// independent and evaluated with `exec`.
pub fn evaluate(
    model: &Model,
    examples: &[Example],
    segments: usize,
    controller: Option<&mut MemoryController>,
    exec: Exec,
) -> Result<Evaluation> {
    if examples.is_empty() {
        return Err(invalid("cannot evaluate an empty dataset"));
    }
    if let Some(bad) = examples.iter().find(|e| e.segment >= segments) {
        return Err(invalid(format!(
            "segment {} outside {segments} segments",
            bad.segment
        )));
    }
    let outcomes: Vec<(ExampleLoss, bool)> = match controller {
        Some(ctrl) => {
            let mut out = Vec::with_capacity(examples.len());
            for ex in examples {
                ctrl.prepare(model, &ex.tokens)?;
                let (loss, trace) = model.example_loss(ex, ctrl.memory())?;
                let (logits, _) = model.forward(&ex.tokens, ctrl.memory())?;
                ctrl.observe(&trace, loss.task)?;
                out.push((loss, argmax(&logits) == ex.label));
            }
            ctrl.finish()?;
            out
        }
        None => exec
            .map(examples, |ex| -> Result<(ExampleLoss, bool)> {
                let (loss, _) = model.example_loss(ex, None)?;
                let (logits, _) = model.forward(&ex.tokens, None)?;
                Ok((loss, argmax(&logits) == ex.label))
            })
            .into_iter()
            .collect::<Result<_>>()?,
    };

    let mut hits = vec![0usize; segments];
    let mut counts = vec![0usize; segments];
    for (ex, (_, ok)) in examples.iter().zip(&outcomes) {
        counts[ex.segment] += 1;
        hits[ex.segment] += usize::from(*ok);
    }
    let n = examples.len() as f64;
    let losses: Vec<ExampleLoss> = outcomes.iter().map(|(l, _)| *l).collect();
    let mean = mean_loss(&losses);
    Ok(Evaluation {
        accuracy: hits.iter().sum::<usize>() as f64 / n,
        per_segment: hits
            .iter()
            .zip(&counts)
            .map(|(&h, &c)| {
                if c == 0 {
                    f64::NAN
                } else {
                    h as f64 / c as f64
                }
            })
            .collect(),
        mean_loss: mean.total,
        mean_task_loss: mean.task,
    })
}
