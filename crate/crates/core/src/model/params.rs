use ndarray::{Array1, Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{check_dim, Result};
use crate::objectives::LayerTransform;

/// Every trainable tensor of the model. Matrices act on row vectors
/// (`y = x W`), except the layer transform which follows
/// [`LayerTransform::apply`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params {
    /// `L x vocab x d` layer embedding tables.
    pub embed: Array3<f64>,
    /// `d x d` query map from the layer mean (empty for the baseline).
    pub w_query: Array2<f64>,
    /// `d x d` key map applied to each layer vector (empty for the baseline).
    pub w_key: Array2<f64>,
    /// `L x d` per-layer key bias (empty for the baseline).
    pub key_bias: Array2<f64>,
    pub transform: LayerTransform,
    /// `attn_layers x d x d` each.
    pub attn_q: Array3<f64>,
    pub attn_k: Array3<f64>,
    pub attn_v: Array3<f64>,
    pub attn_o: Array3<f64>,
    /// `d x classes`.
    pub cls_w: Array2<f64>,
    pub cls_b: Array1<f64>,
}

/// Spread of per-layer offsets around a token's shared base vector at init.
const LAYER_SPREAD: f64 = 0.25;

impl Params {
    pub fn init(config: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d;
        let l = config.effective_layers();
        let scale = 1.0 / (d as f64).sqrt();
        let normal = Normal::new(0.0, scale).expect("valid std");
        let mut sample =
            |shape: usize| -> Vec<f64> { (0..shape).map(|_| normal.sample(&mut rng)).collect() };

        // Layers start as perturbations of one base vector per token so the
        // alignment loss begins small.
        let base =
            Array2::from_shape_vec((config.vocab, d), sample(config.vocab * d)).expect("shape");
        let mut embed = Array3::zeros((l, config.vocab, d));
        for layer in 0..l {
            let offsets =
                Array2::from_shape_vec((config.vocab, d), sample(config.vocab * d)).expect("shape");
            let spread = if l == 1 { 0.0 } else { LAYER_SPREAD };
            embed
                .index_axis_mut(Axis(0), layer)
                .assign(&(&base + &(offsets * spread)));
        }

        let (hd, hl) = if config.use_hierarchy { (d, l) } else { (0, 0) };
        let w_query = Array2::from_shape_vec((hd, hd), sample(hd * hd)).expect("shape");
        let w_key = Array2::from_shape_vec((hd, hd), sample(hd * hd)).expect("shape");
        let key_bias = Array2::from_shape_vec((hl, hd), sample(hl * hd)).expect("shape");
        let transform = LayerTransform::identity(l, d);

        let n = config.attn_layers;
        let mut cube = || Array3::from_shape_vec((n, d, d), sample(n * d * d)).expect("shape");
        let attn_q = cube();
        let attn_k = cube();
        let attn_v = cube();
        let attn_o = cube() * 0.5;
        let cls_w =
            Array2::from_shape_vec((d, config.classes), sample(d * config.classes)).expect("shape");
        Self {
            embed,
            w_query,
            w_key,
            key_bias,
            transform,
            attn_q,
            attn_k,
            attn_v,
            attn_o,
            cls_w,
            cls_b: Array1::zeros(config.classes),
        }
    }

    /// All-zero tensors with the same shapes.
    pub fn zeros_like(&self) -> Self {
        Self {
            embed: Array3::zeros(self.embed.raw_dim()),
            w_query: Array2::zeros(self.w_query.raw_dim()),
            w_key: Array2::zeros(self.w_key.raw_dim()),
            key_bias: Array2::zeros(self.key_bias.raw_dim()),
            transform: LayerTransform::zeros(self.transform.num_gaps() + 1, self.transform.dim()),
            attn_q: Array3::zeros(self.attn_q.raw_dim()),
            attn_k: Array3::zeros(self.attn_k.raw_dim()),
            attn_v: Array3::zeros(self.attn_v.raw_dim()),
            attn_o: Array3::zeros(self.attn_o.raw_dim()),
            cls_w: Array2::zeros(self.cls_w.raw_dim()),
            cls_b: Array1::zeros(self.cls_b.raw_dim()),
        }
    }

    fn slices(&self) -> [&[f64]; 12] {
        fn s(x: Option<&[f64]>) -> &[f64] {
            x.expect("parameters are contiguous")
        }
        [
            s(self.embed.as_slice()),
            s(self.w_query.as_slice()),
            s(self.w_key.as_slice()),
            s(self.key_bias.as_slice()),
            s(self.transform.weights().as_slice()),
            s(self.transform.bias().as_slice()),
            s(self.attn_q.as_slice()),
            s(self.attn_k.as_slice()),
            s(self.attn_v.as_slice()),
            s(self.attn_o.as_slice()),
            s(self.cls_w.as_slice()),
            s(self.cls_b.as_slice()),
        ]
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 12] {
        let (tw, tb) = self.transform.parts_mut();
        fn s(x: Option<&mut [f64]>) -> &mut [f64] {
            x.expect("parameters are contiguous")
        }
        [
            s(self.embed.as_slice_mut()),
            s(self.w_query.as_slice_mut()),
            s(self.w_key.as_slice_mut()),
            s(self.key_bias.as_slice_mut()),
            s(tw.as_slice_mut()),
            s(tb.as_slice_mut()),
            s(self.attn_q.as_slice_mut()),
            s(self.attn_k.as_slice_mut()),
            s(self.attn_v.as_slice_mut()),
            s(self.attn_o.as_slice_mut()),
            s(self.cls_w.as_slice_mut()),
            s(self.cls_b.as_slice_mut()),
        ]
    }

    pub fn len(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        check_dim(self.len(), flat.len())?;
        let mut offset = 0;
        for s in self.slices_mut() {
            s.copy_from_slice(&flat[offset..offset + s.len()]);
            offset += s.len();
        }
        Ok(())
    }

    /// `self[i] = f(self[i], other[i])` over every scalar.
    pub fn zip_apply(&mut self, other: &Params, mut f: impl FnMut(&mut f64, f64)) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, &y) in a.iter_mut().zip(b) {
                f(x, y);
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn add_scaled(&mut self, factor: f64, other: &Params) {
        self.zip_apply(other, |x, y| *x += factor * y);
    }

    pub fn is_finite(&self) -> bool {
        self.slices()
            .iter()
            .all(|s| s.iter().all(|x| x.is_finite()))
    }

    pub fn norm(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}
