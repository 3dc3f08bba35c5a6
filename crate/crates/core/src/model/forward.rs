use ndarray::{s, Array1, Array2, ArrayView1, Axis};

use super::{Example, Model, OpCounter, Params};
use crate::error::{check_dim, invalid, Error, Result};
use crate::hier_embed::{layer_mean, softmax, AlphaWeights, HierEmbedStack};
use crate::memory::{cosine_distance, MemoryState};
use crate::objectives::{loss_gradients_with_targets, outer, targets_from_combined};

/// What a forward pass observed besides the logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    /// Layer weights of every token.
    pub alphas: Vec<AlphaWeights>,
    pub counter: OpCounter,
    /// Attention rows of each block, `T x K` where `K` is `T` or the number
    /// of memory blocks.
    pub attention: Vec<Array2<f64>>,
    /// Mean attention mass per memory block over queries and layers.
    pub block_mass: Vec<f64>,
    /// Combined token embeddings entering the first attention block.
    pub embeddings: Array2<f64>,
}

/// Per-example loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ExampleLoss {
    pub task: f64,
    pub embed: f64,
    pub hier: f64,
    pub total: f64,
}

/// Hierarchical frontend output for one sequence.
pub(crate) struct Frontend {
    pub stacks: Vec<HierEmbedStack>,
    pub means: Vec<Array1<f64>>,
    pub alphas: Vec<AlphaWeights>,
    pub combined: Array2<f64>,
}

struct BlockCache {
    input: Array2<f64>,
    summaries: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Array2<f64>,
    mixed: Array2<f64>,
}

struct Cache {
    frontend: Frontend,
    groups: Option<Vec<Vec<usize>>>,
    blocks: Vec<BlockCache>,
    pooled: Array1<f64>,
    logits: Array1<f64>,
}

fn log_softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let lse = logits.mapv(|x| (x - max).exp()).sum().ln() + max;
    logits.mapv(|x| x - lse)
}

/// Routes every position to the block with the nearest centroid under
/// cosine distance (zero vectors count as distance 1, ties go to the lower
/// block).
fn route(x: &Array2<f64>, centroids: &Array2<f64>) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); centroids.nrows()];
    if groups.is_empty() {
        return groups;
    }
    for (t, row) in x.rows().into_iter().enumerate() {
        let mut best = (f64::INFINITY, 0);
        for (b, c) in centroids.rows().into_iter().enumerate() {
            let dist = cosine_distance(row, c).unwrap_or(1.0);
            if dist < best.0 {
                best = (dist, b);
            }
        }
        groups[best.1].push(t);
    }
    groups
}

/// Block summaries: the mean of routed member rows, or the stored centroid
/// for a block nothing was routed to. Attention scores of a block are
/// offset by the log of its member count, so a block of identical states
/// attracts the same mass as those states would individually; empty blocks
/// get zero weight.
fn summarise(x: &Array2<f64>, groups: &[Vec<usize>], centroids: &Array2<f64>) -> Array2<f64> {
    let mut out = centroids.clone();
    for (mut row, members) in out.rows_mut().into_iter().zip(groups) {
        if members.is_empty() {
            continue;
        }
        row.fill(0.0);
        for &m in members {
            row += &x.row(m);
        }
        row /= members.len() as f64;
    }
    out
}

impl Model {
    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(invalid("a sequence needs at least one token"));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab) {
            return Err(invalid(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab
            )));
        }
        Ok(())
    }

    pub(crate) fn frontend(&self, tokens: &[usize], counter: &mut OpCounter) -> Result<Frontend> {
        self.check_tokens(tokens)?;
        let p = &self.params;
        let d = self.config.d;
        let l = self.config.effective_layers();
        let mut stacks = Vec::with_capacity(tokens.len());
        let mut means = Vec::with_capacity(tokens.len());
        let mut alphas = Vec::with_capacity(tokens.len());
        let mut combined = Array2::zeros((tokens.len(), d));
        for (t, &tok) in tokens.iter().enumerate() {
            let layers = p.embed.slice(s![.., tok, ..]).to_owned();
            let mean = layer_mean(layers.view());
            let stack = if self.config.use_hierarchy {
                let query = mean.dot(&p.w_query);
                let keys = layers.dot(&p.w_key) + &p.key_bias;
                counter.mac_count += ((l + 1) * d * d + 2 * l * d) as u64;
                HierEmbedStack::new(tok, layers, query, keys)?
            } else {
                HierEmbedStack::from_layers(tok, layers)?
            };
            let alpha = self
                .objective
                .attention
                .weights(stack.query(), stack.keys())?;
            combined
                .row_mut(t)
                .assign(&alpha.view().dot(&stack.layers()));
            stacks.push(stack);
            means.push(mean);
            alphas.push(alpha);
        }
        Ok(Frontend {
            stacks,
            means,
            alphas,
            combined,
        })
    }

    /// Combined embeddings and layer weights without running attention.
    pub fn embed(&self, tokens: &[usize]) -> Result<(Array2<f64>, Vec<AlphaWeights>)> {
        let f = self.frontend(tokens, &mut OpCounter::default())?;
        Ok((f.combined, f.alphas))
    }

    /// Layer stacks (with query and keys) for a sequence.
    pub fn stacks(&self, tokens: &[usize]) -> Result<Vec<HierEmbedStack>> {
        Ok(self.frontend(tokens, &mut OpCounter::default())?.stacks)
    }

    fn run(&self, tokens: &[usize], memory: Option<&MemoryState>) -> Result<(Cache, Trace)> {
        let mut counter = OpCounter::default();
        let frontend = self.frontend(tokens, &mut counter)?;
        let n = tokens.len();
        let d = self.config.d;
        let routing = match memory {
            Some(mem) => {
                let mut centroids = Array2::zeros((mem.len(), d));
                for (mut row, block) in centroids.rows_mut().into_iter().zip(mem.blocks()) {
                    check_dim(d, block.centroid.len())?;
                    row.assign(&block.centroid);
                }
                counter.mac_count += (n * mem.len() * d) as u64;
                Some((route(&frontend.combined, &centroids), centroids))
            }
            None => None,
        };
        let p = &self.params;
        let scale = 1.0 / (d as f64).sqrt();
        let mut x = frontend.combined.clone();
        let mut blocks = Vec::with_capacity(self.config.attn_layers);
        let mut attention = Vec::with_capacity(self.config.attn_layers);
        let mut block_mass = vec![0.0; routing.as_ref().map_or(0, |(g, _)| g.len())];

        for layer in 0..self.config.attn_layers {
            let summaries = match &routing {
                Some((g, c)) => {
                    counter.mac_count += (n * d) as u64;
                    summarise(&x, g, c)
                }
                None => x.clone(),
            };
            let keys_len = summaries.nrows();
            let q = x.dot(&p.attn_q.index_axis(Axis(0), layer));
            let k = summaries.dot(&p.attn_k.index_axis(Axis(0), layer));
            let v = summaries.dot(&p.attn_v.index_axis(Axis(0), layer));
            let mut probs = Array2::zeros((n, keys_len));
            if keys_len > 0 {
                let mut scores = q.dot(&k.t()) * scale;
                if let Some((groups, _)) = &routing {
                    // Each block counts once per member; empty blocks drop out.
                    for (mut col, members) in scores.columns_mut().into_iter().zip(groups) {
                        col += (members.len() as f64).ln();
                    }
                }
                for (mut out, row) in probs.rows_mut().into_iter().zip(scores.rows()) {
                    out.assign(&softmax(row));
                }
            }
            counter.scored_pairs += (n * keys_len) as u64;
            let mixed = probs.dot(&v);
            let next = &x + &mixed.dot(&p.attn_o.index_axis(Axis(0), layer));
            counter.mac_count +=
                (2 * n * d * d + 2 * keys_len * d * d + 2 * n * keys_len * d) as u64;
            if !block_mass.is_empty() {
                for (b, m) in probs.sum_axis(Axis(0)).iter().enumerate() {
                    block_mass[b] += m / (n * self.config.attn_layers) as f64;
                }
            }
            attention.push(probs.clone());
            blocks.push(BlockCache {
                input: x,
                summaries,
                q,
                k,
                v,
                probs,
                mixed,
            });
            x = next;
        }

        let pooled = x.mean_axis(Axis(0)).expect("nonempty sequence");
        let logits = pooled.dot(&p.cls_w) + &p.cls_b;
        counter.mac_count += (d * self.config.classes) as u64;
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits"));
        }
        let trace = Trace {
            alphas: frontend.alphas.clone(),
            counter,
            attention,
            block_mass,
            embeddings: frontend.combined.clone(),
        };
        Ok((
            Cache {
                frontend,
                groups: routing.map(|(g, _)| g),
                blocks,
                pooled,
                logits,
            },
            trace,
        ))
    }

    /// Class logits for a token sequence, reading attention keys and values
    /// from `memory` blocks when given.
    pub fn forward(
        &self,
        tokens: &[usize],
        memory: Option<&MemoryState>,
    ) -> Result<(Array1<f64>, Trace)> {
        let (cache, trace) = self.run(tokens, memory)?;
        Ok((cache.logits, trace))
    }

    fn losses(&self, cache: &Cache, label: usize) -> Result<(ExampleLoss, Vec<Array1<f64>>)> {
        if label >= self.config.classes {
            return Err(invalid(format!(
                "label {label} outside {} classes",
                self.config.classes
            )));
        }
        let task = -log_softmax(cache.logits.view())[label];
        let combined: Vec<Array1<f64>> = cache
            .frontend
            .combined
            .rows()
            .into_iter()
            .map(|r| r.to_owned())
            .collect();
        let targets = targets_from_combined(&combined, self.objective.embed.target_window)?;
        let aux = crate::objectives::aux_loss(
            &cache.frontend.stacks,
            &targets,
            &self.params.transform,
            &self.objective,
        )?;
        let total = task + aux.weighted;
        if !total.is_finite() {
            return Err(Error::NonFinite("loss"));
        }
        Ok((
            ExampleLoss {
                task,
                embed: aux.embed,
                hier: aux.hier,
                total,
            },
            targets,
        ))
    }

    /// Loss of one example without gradients.
    pub fn example_loss(
        &self,
        example: &Example,
        memory: Option<&MemoryState>,
    ) -> Result<(ExampleLoss, Trace)> {
        let (cache, trace) = self.run(&example.tokens, memory)?;
        Ok((self.losses(&cache, example.label)?.0, trace))
    }

    /// Loss of one example and its gradient with respect to every parameter.
    pub fn loss_and_grad(
        &self,
        example: &Example,
        memory: Option<&MemoryState>,
    ) -> Result<(ExampleLoss, Params, Trace)> {
        let (cache, trace) = self.run(&example.tokens, memory)?;
        let (loss, targets) = self.losses(&cache, example.label)?;
        let grads = self.backward(&cache, example, &targets)?;
        Ok((loss, grads, trace))
    }

    fn backward(
        &self,
        cache: &Cache,
        example: &Example,
        targets: &[Array1<f64>],
    ) -> Result<Params> {
        let p = &self.params;
        let mut g = p.zeros_like();
        let n = example.tokens.len();
        let d = self.config.d;
        let scale = 1.0 / (d as f64).sqrt();

        // Cross-entropy and classifier.
        let mut dlogits = cache.logits.mapv(f64::exp);
        dlogits /= dlogits.sum();
        dlogits[example.label] -= 1.0;
        g.cls_w = outer(cache.pooled.view(), dlogits.view());
        g.cls_b = dlogits.clone();
        let dpooled = p.cls_w.dot(&dlogits) / n as f64;
        let mut dx = Array2::from_shape_fn((n, d), |(_, j)| dpooled[j]);

        for (layer, bc) in cache.blocks.iter().enumerate().rev() {
            let wq = p.attn_q.index_axis(Axis(0), layer);
            let wk = p.attn_k.index_axis(Axis(0), layer);
            let wv = p.attn_v.index_axis(Axis(0), layer);
            let wo = p.attn_o.index_axis(Axis(0), layer);

            g.attn_o
                .index_axis_mut(Axis(0), layer)
                .assign(&bc.mixed.t().dot(&dx));
            let dmixed = dx.dot(&wo.t());
            let dprobs = dmixed.dot(&bc.v.t());
            let dv = bc.probs.t().dot(&dmixed);
            let mut dscores = Array2::zeros(bc.probs.raw_dim());
            for ((mut ds, pr), dp) in dscores
                .rows_mut()
                .into_iter()
                .zip(bc.probs.rows())
                .zip(dprobs.rows())
            {
                let inner = pr.dot(&dp);
                ds.assign(&(&pr * &(&dp - inner) * scale));
            }
            let dq = dscores.dot(&bc.k);
            let dk = dscores.t().dot(&bc.q);
            g.attn_q
                .index_axis_mut(Axis(0), layer)
                .assign(&bc.input.t().dot(&dq));
            g.attn_k
                .index_axis_mut(Axis(0), layer)
                .assign(&bc.summaries.t().dot(&dk));
            g.attn_v
                .index_axis_mut(Axis(0), layer)
                .assign(&bc.summaries.t().dot(&dv));
            let dsummaries = dk.dot(&wk.t()) + dv.dot(&wv.t());

            let mut dinput = dx + dq.dot(&wq.t());
            match &cache.groups {
                Some(groups) => {
                    for (ds, members) in dsummaries.rows().into_iter().zip(groups) {
                        if members.is_empty() {
                            continue;
                        }
                        let share = &ds / members.len() as f64;
                        for &m in members {
                            dinput.row_mut(m).scaled_add(1.0, &share);
                        }
                    }
                }
                None => dinput += &dsummaries,
            }
            dx = dinput;
        }

        // Auxiliary losses plus the task gradient through the frontend.
        let aux = loss_gradients_with_targets(
            &cache.frontend.stacks,
            targets,
            &p.transform,
            &self.objective,
        )?;
        g.transform = aux.transform;
        let l = self.config.effective_layers();
        for (t, (stack, mut sg)) in cache.frontend.stacks.iter().zip(aux.stacks).enumerate() {
            let task = self.objective.attention.backward(stack, dx.row(t))?;
            sg.add_assign(&task);
            let mut dlayers = sg.layers;
            if self.config.use_hierarchy {
                g.w_query += &outer(cache.frontend.means[t].view(), sg.query.view());
                let dmean = p.w_query.dot(&sg.query) / l as f64;
                g.w_key += &stack.layers().t().dot(&sg.keys);
                g.key_bias += &sg.keys;
                dlayers += &sg.keys.dot(&p.w_key.t());
                dlayers += &dmean;
            }
            let tok = example.tokens[t];
            let mut slot = g.embed.slice_mut(s![.., tok, ..]);
            slot += &dlayers;
        }
        Ok(g)
    }
}
