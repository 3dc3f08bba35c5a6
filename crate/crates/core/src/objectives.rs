//! Auxiliary training objectives on hierarchical embeddings.
//!
//! * embedding loss: mean squared distance between each combined embedding
//!   and a constant contextual target, plus an L2 penalty on every layer
//!   vector of every token;
//! * hierarchy loss: squared residual between layer `l + 1` and an affine
//!   projection of layer `l`, summed over tokens and layer gaps.
//!
//! Targets are a stop-gradient neighbourhood mean of combined embeddings, so
//! the embedding loss is a plain regression and gradients never flow into
//! them.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};
use crate::hier_embed::{HierEmbedStack, LayerAttention, StackGrad};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedLossConfig {
    pub lambda: f64,
    pub target_window: usize,
}

impl Default for EmbedLossConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-4,
            target_window: 2,
        }
    }
}

impl EmbedLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(invalid("lambda must be a nonnegative finite number"));
        }
        if self.target_window == 0 {
            return Err(invalid("target_window must be at least 1"));
        }
        Ok(())
    }
}

/// Weights of the auxiliary losses relative to the task loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub embed: f64,
    pub hier: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            embed: 0.1,
            hier: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.embed.is_finite()
            && self.embed >= 0.0
            && self.hier.is_finite()
            && self.hier >= 0.0)
        {
            return Err(invalid("loss weights must be nonnegative and finite"));
        }
        Ok(())
    }
}

/// Everything the auxiliary objective needs besides the data.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ObjectiveConfig {
    pub embed: EmbedLossConfig,
    pub weights: LossWeights,
    pub attention: LayerAttention,
}

/// One affine map per layer gap: `f_l(v) = W_l v + b_l`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerTransform {
    weights: Array3<f64>,
    bias: Array2<f64>,
}

impl LayerTransform {
    /// `weights` is `(L-1) x d x d`, `bias` is `(L-1) x d`.
    pub fn new(weights: Array3<f64>, bias: Array2<f64>) -> Result<Self> {
        let (gaps, rows, cols) = weights.dim();
        check_dim(rows, cols)?;
        check_dim(gaps, bias.nrows())?;
        check_dim(rows, bias.ncols())?;
        if weights.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("layer transform"));
        }
        Ok(Self { weights, bias })
    }

    pub fn identity(num_layers: usize, dim: usize) -> Self {
        let gaps = num_layers.saturating_sub(1);
        let mut weights = Array3::zeros((gaps, dim, dim));
        for g in 0..gaps {
            for i in 0..dim {
                weights[[g, i, i]] = 1.0;
            }
        }
        Self {
            weights,
            bias: Array2::zeros((gaps, dim)),
        }
    }

    pub fn zeros(num_layers: usize, dim: usize) -> Self {
        let gaps = num_layers.saturating_sub(1);
        Self {
            weights: Array3::zeros((gaps, dim, dim)),
            bias: Array2::zeros((gaps, dim)),
        }
    }

    pub fn num_gaps(&self) -> usize {
        self.weights.len_of(Axis(0))
    }

    pub fn dim(&self) -> usize {
        self.bias.ncols()
    }

    pub fn weights(&self) -> &Array3<f64> {
        &self.weights
    }

    pub fn bias(&self) -> &Array2<f64> {
        &self.bias
    }

    pub fn weights_mut(&mut self) -> &mut Array3<f64> {
        &mut self.weights
    }

    pub fn bias_mut(&mut self) -> &mut Array2<f64> {
        &mut self.bias
    }

    pub fn parts_mut(&mut self) -> (&mut Array3<f64>, &mut Array2<f64>) {
        (&mut self.weights, &mut self.bias)
    }

    /// `f_gap(v)`.
    pub fn apply(&self, gap: usize, v: ArrayView1<f64>) -> Array1<f64> {
        self.weights.index_axis(Axis(0), gap).dot(&v) + self.bias.row(gap)
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.weights
            .iter()
            .chain(self.bias.iter())
            .copied()
            .collect()
    }

    pub fn from_flat(&self, flat: &[f64]) -> Result<Self> {
        check_dim(self.param_count(), flat.len())?;
        let (w, b) = flat.split_at(self.weights.len());
        Self::new(
            Array3::from_shape_vec(self.weights.raw_dim(), w.to_vec()).expect("shape checked"),
            Array2::from_shape_vec(self.bias.raw_dim(), b.to_vec()).expect("shape checked"),
        )
    }

    fn check_stack(&self, stack: &HierEmbedStack) -> Result<()> {
        check_dim(self.dim(), stack.dim())?;
        if stack.num_layers() >= 2 {
            check_dim(stack.num_layers() - 1, self.num_gaps())?;
        }
        Ok(())
    }
}

/// Neighbourhood-mean targets over already combined embeddings.
///
/// Token `t` gets the mean of tokens `t - window ..= t + window` (clamped to
/// the sequence) excluding itself; a lone token is its own target.
pub fn targets_from_combined(combined: &[Array1<f64>], window: usize) -> Result<Vec<Array1<f64>>> {
    if combined.is_empty() {
        return Err(invalid("at least one token is required"));
    }
    if window == 0 {
        return Err(invalid("target window must be at least 1"));
    }
    let n = combined.len();
    Ok((0..n)
        .map(|t| {
            let lo = t.saturating_sub(window);
            let hi = (t + window).min(n - 1);
            let mut sum = Array1::zeros(combined[t].len());
            let mut count = 0usize;
            for (s, e) in combined.iter().enumerate().take(hi + 1).skip(lo) {
                if s != t {
                    sum += e;
                    count += 1;
                }
            }
            if count == 0 {
                combined[t].clone()
            } else {
                sum / count as f64
            }
        })
        .collect())
}

/// Contextual regression targets for a token sequence.
pub fn embed_target(stacks: &[HierEmbedStack], window: usize) -> Result<Vec<Array1<f64>>> {
    embed_target_with(stacks, window, &LayerAttention::default())
}

pub fn embed_target_with(
    stacks: &[HierEmbedStack],
    window: usize,
    attention: &LayerAttention,
) -> Result<Vec<Array1<f64>>> {
    let combined = combined_embeddings(stacks, attention)?;
    targets_from_combined(&combined, window)
}

pub fn combined_embeddings(
    stacks: &[HierEmbedStack],
    attention: &LayerAttention,
) -> Result<Vec<Array1<f64>>> {
    stacks
        .iter()
        .map(|s| {
            let alpha = attention.weights(s.query(), s.keys())?;
            crate::hier_embed::combine(&alpha, s.layers())
        })
        .collect()
}

/// `(1/T) sum_t |e_t - e*_t|^2 + lambda sum_t sum_l |v_{t,l}|^2`.
pub fn embed_loss(
    combined: &[Array1<f64>],
    targets: &[Array1<f64>],
    layers: &[ArrayView2<f64>],
    lambda: f64,
) -> Result<f64> {
    if combined.is_empty() {
        return Err(invalid("at least one token is required"));
    }
    check_dim(combined.len(), targets.len())?;
    check_dim(combined.len(), layers.len())?;
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(invalid("lambda must be nonnegative"));
    }
    let mut fit = 0.0;
    for (e, target) in combined.iter().zip(targets) {
        check_dim(e.len(), target.len())?;
        fit += (e - target).mapv(|x| x * x).sum();
    }
    let reg: f64 = layers
        .iter()
        .map(|v| v.iter().map(|x| x * x).sum::<f64>())
        .sum();
    Ok(fit / combined.len() as f64 + lambda * reg)
}

/// `sum_t sum_l |v_{t,l+1} - f_l(v_{t,l})|^2`; zero for single-layer stacks.
pub fn hierarchy_loss(stacks: &[HierEmbedStack], transform: &LayerTransform) -> Result<f64> {
    let mut total = 0.0;
    for stack in stacks {
        if stack.num_layers() < 2 {
            continue;
        }
        transform.check_stack(stack)?;
        for r in gap_residuals(stack, transform) {
            total += r.mapv(|x| x * x).sum();
        }
    }
    Ok(total)
}

/// `v_{l+1} - f_l(v_l)` for each gap of one stack.
pub(crate) fn gap_residuals(
    stack: &HierEmbedStack,
    transform: &LayerTransform,
) -> Vec<Array1<f64>> {
    let layers = stack.layers();
    (0..stack.num_layers().saturating_sub(1))
        .map(|g| &layers.row(g + 1) - &transform.apply(g, layers.row(g)))
        .collect()
}

/// `task + w_e * embed + w_h * hier`.
pub fn total_loss(task: f64, embed: f64, hier: f64, weights: &LossWeights) -> Result<f64> {
    weights.validate()?;
    let total = task + weights.embed * embed + weights.hier * hier;
    if total.is_finite() {
        Ok(total)
    } else {
        Err(Error::NonFinite("total loss"))
    }
}

/// Loss values for the auxiliary objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AuxLoss {
    pub embed: f64,
    pub hier: f64,
    /// `w_e * embed + w_h * hier`.
    pub weighted: f64,
}

/// Analytic gradients of the weighted auxiliary loss.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveGradients {
    pub loss: AuxLoss,
    pub stacks: Vec<StackGrad>,
    pub transform: LayerTransform,
}

/// Evaluates the weighted auxiliary objective against fixed targets.
pub fn aux_loss(
    stacks: &[HierEmbedStack],
    targets: &[Array1<f64>],
    transform: &LayerTransform,
    config: &ObjectiveConfig,
) -> Result<AuxLoss> {
    let combined = combined_embeddings(stacks, &config.attention)?;
    let layers: Vec<_> = stacks.iter().map(|s| s.layers()).collect();
    let embed = embed_loss(&combined, targets, &layers, config.embed.lambda)?;
    let hier = hierarchy_loss(stacks, transform)?;
    Ok(AuxLoss {
        embed,
        hier,
        weighted: config.weights.embed * embed + config.weights.hier * hier,
    })
}

/// Gradients of `w_e * embed_loss + w_h * hierarchy_loss` with targets
/// computed from the stacks themselves and held constant.
pub fn loss_gradients(
    stacks: &[HierEmbedStack],
    transform: &LayerTransform,
    config: &ObjectiveConfig,
) -> Result<ObjectiveGradients> {
    config.embed.validate()?;
    let targets = embed_target_with(stacks, config.embed.target_window, &config.attention)?;
    loss_gradients_with_targets(stacks, &targets, transform, config)
}

/// As [`loss_gradients`] with caller-supplied constant targets.
pub fn loss_gradients_with_targets(
    stacks: &[HierEmbedStack],
    targets: &[Array1<f64>],
    transform: &LayerTransform,
    config: &ObjectiveConfig,
) -> Result<ObjectiveGradients> {
    config.weights.validate()?;
    let loss = aux_loss(stacks, targets, transform, config)?;
    let n = stacks.len() as f64;
    let w_e = config.weights.embed;
    let w_h = config.weights.hier;
    let lambda = config.embed.lambda;

    let mut transform_grad = LayerTransform::zeros(transform.num_gaps() + 1, transform.dim());
    let mut grads = Vec::with_capacity(stacks.len());
    for (stack, target) in stacks.iter().zip(targets) {
        let combined = stack_combined(stack, &config.attention)?;
        let grad_e = (&combined - target) * (2.0 * w_e / n);
        let mut grad = config.attention.backward(stack, grad_e.view())?;
        grad.layers.scaled_add(2.0 * w_e * lambda, &stack.layers());

        if stack.num_layers() >= 2 && w_h != 0.0 {
            for (g, r) in gap_residuals(stack, transform).into_iter().enumerate() {
                let gr = r * (2.0 * w_h);
                let v_lo = stack.layers().row(g).to_owned();
                // d/d v_{l+1} = 2r, d/d v_l = -2 W^T r, d/dW = -2 r v_l^T, d/db = -2 r
                grad.layers.row_mut(g + 1).scaled_add(1.0, &gr);
                let w = transform.weights.index_axis(Axis(0), g);
                grad.layers.row_mut(g).scaled_add(-1.0, &w.t().dot(&gr));
                let outer = outer(gr.view(), v_lo.view());
                transform_grad
                    .weights
                    .index_axis_mut(Axis(0), g)
                    .scaled_add(-1.0, &outer);
                transform_grad.bias.row_mut(g).scaled_add(-1.0, &gr);
            }
        }
        grads.push(grad);
    }
    Ok(ObjectiveGradients {
        loss,
        stacks: grads,
        transform: transform_grad,
    })
}

fn stack_combined(stack: &HierEmbedStack, attention: &LayerAttention) -> Result<Array1<f64>> {
    let alpha = attention.weights(stack.query(), stack.keys())?;
    crate::hier_embed::combine(&alpha, stack.layers())
}

pub(crate) fn outer(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

/// Central finite differences of `loss` at `params`.
pub fn fd_gradient<F>(loss: F, params: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if !(h.is_finite() && h > 0.0) {
        return Err(invalid("finite-difference step must be positive"));
    }
    let mut probe = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let base = params[i];
        if base + h == base || base - h == base {
            return Err(invalid(format!(
                "step {h} vanishes against parameter {base}"
            )));
        }
        probe[i] = base + h;
        let plus = loss(&probe);
        probe[i] = base - h;
        let minus = loss(&probe);
        probe[i] = base;
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Gradient descent on the transform alone with the stacks held fixed.
///
/// The step is halved (and the step rejected) whenever the loss would
/// increase. Returns the fitted transform and the loss after every step,
/// starting with the initial loss.
pub fn descend_transform(
    stacks: &[HierEmbedStack],
    transform: &LayerTransform,
    steps: usize,
    initial_step: f64,
) -> Result<(LayerTransform, Vec<f64>)> {
    if !(initial_step.is_finite() && initial_step > 0.0) {
        return Err(invalid("step size must be positive"));
    }
    let config = ObjectiveConfig {
        weights: LossWeights {
            embed: 0.0,
            hier: 1.0,
        },
        ..Default::default()
    };
    let targets: Vec<_> = stacks.iter().map(|s| Array1::zeros(s.dim())).collect();
    let mut current = transform.clone();
    let mut loss = hierarchy_loss(stacks, &current)?;
    let mut history = vec![loss];
    let mut step = initial_step;
    for _ in 0..steps {
        let grads = loss_gradients_with_targets(stacks, &targets, &current, &config)?;
        loop {
            let candidate = LayerTransform::new(
                &current.weights - &(&grads.transform.weights * step),
                &current.bias - &(&grads.transform.bias * step),
            );
            let accepted = candidate
                .ok()
                .and_then(|c| hierarchy_loss(stacks, &c).ok().map(|l| (c, l)))
                .filter(|(_, l)| *l <= loss);
            match accepted {
                Some((c, l)) => {
                    current = c;
                    loss = l;
                    break;
                }
                None if step > 1e-300 => step *= 0.5,
                None => break,
            }
        }
        history.push(loss);
    }
    Ok((current, history))
}
