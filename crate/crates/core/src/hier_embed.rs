//! Hierarchical token embeddings.
//!
//! Every token carries a stack of `L` layer vectors. A per-token query is
//! scored against one key per layer, the scores are softmax-normalised into
//! layer weights, and the token embedding is the weighted sum of its layers.
//! The similarity is the plain dot product, which makes the weight gradient
//! with respect to the query `alpha_l * (k_l - sum_j alpha_j k_j)`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{check_dim, invalid, Error, Result};

/// Layer stack, query and per-layer keys for a single token.
#[derive(Clone, Debug, PartialEq)]
pub struct HierEmbedStack {
    token_id: usize,
    layers: Array2<f64>,
    query: Array1<f64>,
    keys: Array2<f64>,
}

impl HierEmbedStack {
    /// `layers` and `keys` are `L x d`, `query` has length `d`.
    pub fn new(
        token_id: usize,
        layers: Array2<f64>,
        query: Array1<f64>,
        keys: Array2<f64>,
    ) -> Result<Self> {
        let (l, d) = layers.dim();
        if l == 0 || d == 0 {
            return Err(invalid(
                "a stack needs at least one layer of dimension >= 1",
            ));
        }
        check_dim(d, query.len())?;
        check_dim(l, keys.nrows())?;
        check_dim(d, keys.ncols())?;
        if !all_finite(layers.iter()) || !all_finite(query.iter()) || !all_finite(keys.iter()) {
            return Err(Error::NonFinite("embedding stack"));
        }
        Ok(Self {
            token_id,
            layers,
            query,
            keys,
        })
    }

    /// A stack whose layer weights are irrelevant (query and keys are zero).
    pub fn from_layers(token_id: usize, layers: Array2<f64>) -> Result<Self> {
        let (l, d) = layers.dim();
        Self::new(token_id, layers, Array1::zeros(d), Array2::zeros((l, d)))
    }

    pub fn token_id(&self) -> usize {
        self.token_id
    }

    pub fn num_layers(&self) -> usize {
        self.layers.nrows()
    }

    pub fn dim(&self) -> usize {
        self.layers.ncols()
    }

    pub fn layers(&self) -> ArrayView2<'_, f64> {
        self.layers.view()
    }

    pub fn query(&self) -> ArrayView1<'_, f64> {
        self.query.view()
    }

    pub fn keys(&self) -> ArrayView2<'_, f64> {
        self.keys.view()
    }

    /// Replaces the layer vectors, keeping query and keys.
    pub fn with_layers(&self, layers: Array2<f64>) -> Result<Self> {
        Self::new(self.token_id, layers, self.query.clone(), self.keys.clone())
    }

    pub fn weights(&self) -> Result<AlphaWeights> {
        layer_weights(self.query.view(), self.keys.view())
    }

    /// Weighted combination of the layers under the stack's own weights.
    pub fn combined(&self) -> Result<Array1<f64>> {
        combine(&self.weights()?, self.layers.view())
    }
}

/// Softmax weights over the layers of one token.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaWeights(Array1<f64>);

impl AlphaWeights {
    /// Validates nonnegativity and unit sum (within `1e-9`).
    pub fn new(weights: Array1<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(invalid("layer weights must be nonempty"));
        }
        if !all_finite(weights.iter()) || weights.iter().any(|&w| !(0.0..=1.0).contains(&w)) {
            return Err(invalid("layer weights must lie in [0, 1]"));
        }
        let total: f64 = weights.sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("layer weights sum to {total}, not 1")));
        }
        Ok(Self(weights))
    }

    pub fn one_hot(len: usize, index: usize) -> Result<Self> {
        if index >= len {
            return Err(invalid(format!(
                "index {index} out of range for {len} layers"
            )));
        }
        let mut w = Array1::zeros(len);
        w[index] = 1.0;
        Ok(Self(w))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn view(&self) -> ArrayView1<'_, f64> {
        self.0.view()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice().expect("weights are contiguous")
    }

    pub fn into_inner(self) -> Array1<f64> {
        self.0
    }
}

fn all_finite<'a>(mut it: impl Iterator<Item = &'a f64>) -> bool {
    it.all(|v| v.is_finite())
}

/// Dot-product similarity between a query and a key.
pub fn similarity(q: ArrayView1<f64>, k: ArrayView1<f64>) -> Result<f64> {
    check_dim(q.len(), k.len())?;
    let s = q.dot(&k);
    if s.is_finite() {
        Ok(s)
    } else {
        Err(Error::NonFinite("similarity"))
    }
}

/// Layer attention with an optional softmax temperature.
///
/// With `temperature == 1` the scores are the raw dot products. Any other
/// temperature divides the scores, and every derivative picks up the same
/// `1 / temperature` factor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerAttention {
    pub temperature: f64,
}

impl Default for LayerAttention {
    fn default() -> Self {
        Self { temperature: 1.0 }
    }
}

impl LayerAttention {
    pub fn new(temperature: f64) -> Result<Self> {
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(invalid("temperature must be positive and finite"));
        }
        Ok(Self { temperature })
    }

    fn scores(&self, q: ArrayView1<f64>, keys: ArrayView2<f64>) -> Result<Array1<f64>> {
        if keys.nrows() == 0 {
            return Err(invalid("at least one layer key is required"));
        }
        check_dim(q.len(), keys.ncols())?;
        let mut scores = Array1::zeros(keys.nrows());
        for (s, k) in scores.iter_mut().zip(keys.rows()) {
            *s = similarity(q, k)? / self.temperature;
        }
        Ok(scores)
    }

    pub fn weights(&self, q: ArrayView1<f64>, keys: ArrayView2<f64>) -> Result<AlphaWeights> {
        let scores = self.scores(q, keys)?;
        Ok(AlphaWeights(softmax(scores.view())))
    }

    /// `L x d` Jacobian of the layer weights with respect to the query.
    pub fn jacobian(&self, q: ArrayView1<f64>, keys: ArrayView2<f64>) -> Result<Array2<f64>> {
        let alpha = self.weights(q, keys)?;
        Ok(self.jacobian_with(&alpha, keys))
    }

    fn jacobian_with(&self, alpha: &AlphaWeights, keys: ArrayView2<f64>) -> Array2<f64> {
        let a = alpha.view();
        let expected_key = a.dot(&keys);
        let mut jac = Array2::zeros(keys.raw_dim());
        for ((mut row, k), &al) in jac.rows_mut().into_iter().zip(keys.rows()).zip(a.iter()) {
            row.assign(&(&k - &expected_key));
            row *= al / self.temperature;
        }
        jac
    }

    /// Pulls a gradient on the combined embedding back onto the layers, the
    /// query and the keys of a stack.
    pub fn backward(
        &self,
        stack: &HierEmbedStack,
        grad_embedding: ArrayView1<f64>,
    ) -> Result<StackGrad> {
        check_dim(stack.dim(), grad_embedding.len())?;
        let alpha = self.weights(stack.query(), stack.keys())?;
        let a = alpha.view();

        let mut layers = Array2::zeros(stack.layers.raw_dim());
        for (mut row, &al) in layers.rows_mut().into_iter().zip(a.iter()) {
            row.assign(&(&grad_embedding * al));
        }
        let grad_alpha = stack.layers.dot(&grad_embedding);

        let jac = self.jacobian_with(&alpha, stack.keys());
        let query = grad_alpha.dot(&jac);

        let mean_grad = a.dot(&grad_alpha);
        let mut keys = Array2::zeros(stack.keys.raw_dim());
        for (l, mut row) in keys.rows_mut().into_iter().enumerate() {
            let grad_score = a[l] * (grad_alpha[l] - mean_grad) / self.temperature;
            row.assign(&(&stack.query * grad_score));
        }
        Ok(StackGrad {
            layers,
            query,
            keys,
        })
    }
}

/// Gradients with respect to the parts of one [`HierEmbedStack`].
#[derive(Clone, Debug, PartialEq)]
pub struct StackGrad {
    pub layers: Array2<f64>,
    pub query: Array1<f64>,
    pub keys: Array2<f64>,
}

impl StackGrad {
    pub fn zeros(num_layers: usize, dim: usize) -> Self {
        Self {
            layers: Array2::zeros((num_layers, dim)),
            query: Array1::zeros(dim),
            keys: Array2::zeros((num_layers, dim)),
        }
    }

    pub fn add_assign(&mut self, other: &StackGrad) {
        self.layers += &other.layers;
        self.query += &other.query;
        self.keys += &other.keys;
    }
}

/// Numerically stable softmax (max subtraction).
pub fn softmax(scores: ArrayView1<f64>) -> Array1<f64> {
    let max = scores.fold(f64::NEG_INFINITY, |m, &s| m.max(s));
    let mut out = scores.mapv(|s| (s - max).exp());
    let total = out.sum();
    out /= total;
    out
}

/// Softmax layer weights with the dot-product similarity.
pub fn layer_weights(q: ArrayView1<f64>, keys: ArrayView2<f64>) -> Result<AlphaWeights> {
    LayerAttention::default().weights(q, keys)
}

/// Weighted sum of layer vectors.
pub fn combine(alpha: &AlphaWeights, layers: ArrayView2<f64>) -> Result<Array1<f64>> {
    check_dim(layers.nrows(), alpha.len())?;
    Ok(alpha.view().dot(&layers))
}

/// Analytic Jacobian of [`layer_weights`] with respect to the query.
pub fn alpha_jacobian(q: ArrayView1<f64>, keys: ArrayView2<f64>) -> Result<Array2<f64>> {
    LayerAttention::default().jacobian(q, keys)
}

/// Central-difference estimate of [`alpha_jacobian`] with step `h`.
pub fn fd_alpha_jacobian(q: ArrayView1<f64>, keys: ArrayView2<f64>, h: f64) -> Result<Array2<f64>> {
    if !(h.is_finite() && h > 0.0) {
        return Err(invalid("finite-difference step must be positive"));
    }
    let mut jac = Array2::zeros((keys.nrows(), q.len()));
    let mut probe = q.to_owned();
    for i in 0..q.len() {
        let base = q[i];
        if base + h == base || base - h == base {
            return Err(invalid(format!(
                "step {h} vanishes against query component {base}"
            )));
        }
        probe[i] = base + h;
        let plus = layer_weights(probe.view(), keys)?.into_inner();
        probe[i] = base - h;
        let minus = layer_weights(probe.view(), keys)?.into_inner();
        probe[i] = base;
        jac.column_mut(i).assign(&((plus - minus) / (2.0 * h)));
    }
    Ok(jac)
}

/// Mean of the layer vectors, used as the input to the query/key maps.
pub fn layer_mean(layers: ArrayView2<f64>) -> Array1<f64> {
    layers
        .mean_axis(Axis(0))
        .expect("stack has at least one layer")
}
