//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test --test acceptance -- 4 9`.

use std::path::Path;
use std::time::Instant;

use hiermem::harness::run::train_overfit;
use hiermem::harness::{gen_random_set, run, shift_eval, RunConfig, RunOptions, Task};
use hiermem::hier_embed::{alpha_jacobian, layer_weights, HierEmbedStack, LayerAttention};
use hiermem::memory::{cluster_tokens, rectify, MemoryState, ShiftDetectorState};
use hiermem::model::{attention_op_count, evaluate, Model, ModelConfig};
use hiermem::objectives::{
    aux_loss, descend_transform, embed_target_with, fd_gradient, hierarchy_loss, loss_gradients,
    EmbedLossConfig, LayerTransform, LossWeights, ObjectiveConfig,
};
use hiermem::parallel::Exec;
use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Dirichlet, Distribution, StandardNormal};

type Criterion = (usize, &'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn normal_array<D: ndarray::Dimension, Sh: ndarray::ShapeBuilder<Dim = D>>(
    rng: &mut ChaCha8Rng,
    shape: Sh,
) -> ndarray::Array<f64, D> {
    ndarray::Array::from_shape_simple_fn(shape, || rng.sample::<f64, _>(StandardNormal))
}

fn frobenius(a: ArrayView2<f64>) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn l2(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

// Criterion 1.

/// Central differences of `layer_weights` in each query coordinate.
fn fd_jacobian(q: ArrayView1<f64>, keys: ArrayView2<f64>, h: f64) -> Array2<f64> {
    let mut jac = Array2::zeros((keys.nrows(), q.len()));
    for i in 0..q.len() {
        let mut plus = q.to_owned();
        let mut minus = q.to_owned();
        plus[i] += h;
        minus[i] -= h;
        let ap = layer_weights(plus.view(), keys).unwrap().into_inner();
        let am = layer_weights(minus.view(), keys).unwrap().into_inner();
        jac.column_mut(i).assign(&((ap - am) / (2.0 * h)));
    }
    jac
}

struct Problem {
    tokens: usize,
    layers: usize,
    dim: usize,
}

impl Problem {
    fn stacks_from(&self, flat: &[f64]) -> (Vec<HierEmbedStack>, LayerTransform) {
        let (t, l, d) = (self.tokens, self.layers, self.dim);
        let per = 2 * l * d + d;
        let stacks = (0..t)
            .map(|i| {
                let p = &flat[i * per..(i + 1) * per];
                let layers = Array2::from_shape_vec((l, d), p[..l * d].to_vec()).unwrap();
                let query = Array1::from_vec(p[l * d..l * d + d].to_vec());
                let keys = Array2::from_shape_vec((l, d), p[l * d + d..].to_vec()).unwrap();
                HierEmbedStack::new(i, layers, query, keys).unwrap()
            })
            .collect();
        let rest = &flat[t * per..];
        let g = l - 1;
        let weights = Array3::from_shape_vec((g, d, d), rest[..g * d * d].to_vec()).unwrap();
        let bias = Array2::from_shape_vec((g, d), rest[g * d * d..].to_vec()).unwrap();
        (stacks, LayerTransform::new(weights, bias).unwrap())
    }

    fn flat_len(&self) -> usize {
        let (t, l, d) = (self.tokens, self.layers, self.dim);
        t * (2 * l * d + d) + (l - 1) * (d * d + d)
    }
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_jac: f64 = 0.0;
    for _ in 0..100 {
        let d = rng.random_range(1..=8);
        let l = rng.random_range(1..=5);
        let q: Array1<f64> = normal_array(&mut rng, d);
        let keys: Array2<f64> = normal_array(&mut rng, (l, d));
        let analytic = alpha_jacobian(q.view(), keys.view()).unwrap();
        let numeric = fd_jacobian(q.view(), keys.view(), 1e-5);
        let diff = frobenius((&analytic - &numeric).view());
        let norm = frobenius(analytic.view());
        // A single layer has a constant weight and an all-zero Jacobian.
        let err = if norm == 0.0 { diff } else { diff / norm };
        worst_jac = worst_jac.max(err);
    }

    let mut worst_grad: f64 = 0.0;
    for _ in 0..50 {
        let p = Problem {
            tokens: rng.random_range(1..=4),
            layers: rng.random_range(2..=5),
            dim: rng.random_range(1..=8),
        };
        let flat: Vec<f64> = (0..p.flat_len())
            .map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let config = ObjectiveConfig {
            embed: EmbedLossConfig {
                lambda: rng.random_range(0.0..0.1),
                target_window: rng.random_range(1..=3),
            },
            weights: LossWeights {
                embed: rng.random_range(0.1..1.0),
                hier: rng.random_range(0.1..1.0),
            },
            attention: LayerAttention::new(rng.random_range(0.5..2.0)).unwrap(),
        };
        let (stacks, transform) = p.stacks_from(&flat);
        let grads = loss_gradients(&stacks, &transform, &config).unwrap();
        let targets =
            embed_target_with(&stacks, config.embed.target_window, &config.attention).unwrap();
        let mut analytic = Vec::with_capacity(flat.len());
        for g in &grads.stacks {
            analytic.extend(g.layers.iter());
            analytic.extend(g.query.iter());
            analytic.extend(g.keys.iter());
        }
        analytic.extend(grads.transform.weights().iter());
        analytic.extend(grads.transform.bias().iter());
        let numeric = fd_gradient(
            |x| {
                let (s, t) = p.stacks_from(x);
                aux_loss(&s, &targets, &t, &config).unwrap().weighted
            },
            &flat,
            1e-5,
        )
        .unwrap();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
        worst_grad = worst_grad.max(l2(&diff) / l2(&analytic).max(f64::MIN_POSITIVE));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst_jac <= 1e-6 && worst_grad <= 1e-5 && secs < 10.0,
        format!("worst Jacobian rel err {worst_jac:.2e} (<= 1e-6), worst loss-gradient rel err {worst_grad:.2e} (<= 1e-5), {secs:.2} s (< 10 s)"),
    )
}

// Criterion 2.

fn simplex_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_sum: f64 = 0.0;
    let mut negatives = 0;
    let mut errors = 0;
    for _ in 0..10_000 {
        let d = rng.random_range(1..=16);
        let l = rng.random_range(1..=8);
        let scale = 10f64.powf(rng.random_range(-3.0..3.0));
        let q: Array1<f64> = normal_array(&mut rng, d) * scale;
        let keys: Array2<f64> = normal_array(&mut rng, (l, d)) * scale;
        match layer_weights(q.view(), keys.view()) {
            Ok(alpha) => {
                let s: f64 = alpha.as_slice().iter().sum();
                worst_sum = worst_sum.max((s - 1.0).abs());
                negatives += alpha
                    .as_slice()
                    .iter()
                    .filter(|&&a| a < 0.0 || a.is_nan())
                    .count();
            }
            Err(_) => errors += 1,
        }
    }
    outcome(
        worst_sum <= 1e-12 && negatives == 0 && errors == 0,
        format!("10000 inputs, worst |sum - 1| {worst_sum:.1e} (<= 1e-12), {negatives} negative entries, {errors} errors"),
    )
}

// Criterion 3.

fn oracle_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Option<f64> {
    let (na, nb) = (a.dot(&a).sqrt(), b.dot(&b).sqrt());
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let d = (1.0 - a.dot(&b) / (na * nb)).clamp(0.0, 2.0);
    Some(if d < 1e-12 { 0.0 } else { d })
}

/// Average linkage recomputed from scratch at every merge.
fn oracle_partition(v: ArrayView2<f64>, theta: f64) -> Vec<Vec<usize>> {
    let n = v.nrows();
    let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                let mut total = 0.0;
                let mut valid = true;
                for &i in &clusters[a] {
                    for &j in &clusters[b] {
                        match oracle_distance(v.row(i), v.row(j)) {
                            Some(x) => total += x,
                            None => valid = false,
                        }
                    }
                }
                if !valid {
                    continue;
                }
                let avg = total / (clusters[a].len() * clusters[b].len()) as f64;
                if best.is_none_or(|(d, _, _)| avg < d) {
                    best = Some((avg, a, b));
                }
            }
        }
        match best {
            Some((d, a, b)) if d <= theta => {
                let moved = clusters.remove(b);
                clusters[a].extend(moved);
                clusters[a].sort_unstable();
            }
            _ => break,
        }
    }
    clusters.sort();
    clusters
}

fn clustering_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    let mut multi_member = 0;
    for _ in 0..200 {
        let n = rng.random_range(1..=8);
        let d = rng.random_range(1..=4);
        let mut v: Array2<f64> = normal_array(&mut rng, (n, d));
        for i in 1..n {
            match rng.random_range(0..10) {
                0 => {
                    let src = v.row(rng.random_range(0..i)).to_owned();
                    v.row_mut(i).assign(&src);
                }
                1 => v.row_mut(i).fill(0.0),
                _ => {}
            }
        }
        let theta = rng.random_range(0.0..1.2);
        let state = cluster_tokens(v.view(), theta).unwrap();
        let mut got: Vec<Vec<usize>> = state
            .blocks()
            .iter()
            .map(|b| b.member_tokens.iter().copied().collect())
            .collect();
        got.sort();
        let want = oracle_partition(v.view(), theta);
        if want.len() < n {
            multi_member += 1;
        }
        if got != want {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!("200 instances (n <= 8, {multi_member} with merges), {mismatches} partitions differ from the brute-force oracle"),
    )
}

// Criterion 4.

fn op_count_proxy() -> Outcome {
    let mut details = Vec::new();
    let mut pass = true;
    for t in [64usize, 256, 1024] {
        let b = (0.55 * t as f64).ceil() as usize;
        let config = ModelConfig {
            d: 8,
            layers: 2,
            vocab: 50,
            ..Default::default()
        };
        let model = Model::new(config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(t as u64);
        let tokens: Vec<usize> = (0..t).map(|_| rng.random_range(0..config.vocab)).collect();
        let (embeddings, _) = model.embed(&tokens).unwrap();
        let memory = MemoryState::contiguous(embeddings.view(), b).unwrap();
        let (_, dense) = model.forward(&tokens, None).unwrap();
        let (_, sparse) = model.forward(&tokens, Some(&memory)).unwrap();
        let (dense, sparse) = (dense.counter.scored_pairs, sparse.counter.scored_pairs);
        let exact = dense == attention_op_count(t, None, config.attn_layers)
            && sparse == attention_op_count(t, Some(b), config.attn_layers);
        let reduction = 1.0 - sparse as f64 / dense as f64;
        let within = (reduction - 0.45).abs() <= 0.01;
        pass &= exact && within;
        details.push(format!(
            "T={t} B={b} reduction {:.2}%{} counts {}",
            100.0 * reduction,
            if within { "" } else { " (outside 45 +- 1)" },
            if exact { "exact" } else { "MISMATCH" }
        ));
    }
    outcome(pass, details.join("; "))
}

// Criterion 5.

const DETECT_WINDOW: usize = 32;
const CHANGE_AT: usize = 160;
const STREAM_LEN: usize = 320;

fn stream_events(seed: u64, planted: bool) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let before = Dirichlet::new([16.0, 12.0, 8.0, 4.0]).unwrap();
    let after = Dirichlet::new([4.0, 8.0, 12.0, 16.0]).unwrap();
    let mut detector = ShiftDetectorState::new(4, DETECT_WINDOW, 0.05).unwrap();
    let mut events = Vec::new();
    for i in 1..=STREAM_LEN {
        let sample = if planted && i > CHANGE_AT {
            after.sample(&mut rng)
        } else {
            before.sample(&mut rng)
        };
        if let Some(e) = detector.observe_slice(&sample).unwrap() {
            events.push(e.sample as usize);
        }
    }
    events
}

fn shift_detection() -> Outcome {
    let timely = (0..100u64)
        .filter(|&s| {
            let events = stream_events(s, true);
            events
                .first()
                .is_some_and(|&e| e > CHANGE_AT && e <= CHANGE_AT + DETECT_WINDOW)
        })
        .count();
    let false_alarms = (1000..1100u64)
        .filter(|&s| !stream_events(s, false).is_empty())
        .count();
    outcome(
        timely >= 95 && false_alarms == 0,
        format!("planted change detected within {DETECT_WINDOW} steps in {timely}/100 (>= 95); null streams firing {false_alarms}/100 (0)"),
    )
}

// Criterion 6.

fn residual(transform: &LayerTransform, layers: ArrayView2<f64>, gap: usize) -> f64 {
    let w = transform.weights().index_axis(ndarray::Axis(0), gap);
    let r = &layers.row(gap + 1) - &w.dot(&layers.row(gap)) - transform.bias().row(gap);
    r.dot(&r).sqrt()
}

fn rectify_contraction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    let mut checks = 0;
    for eta in [0.25, 0.5, 1.0] {
        for _ in 0..50 {
            let l = rng.random_range(2..=5);
            let d = rng.random_range(1..=6);
            let transform = LayerTransform::new(
                normal_array(&mut rng, (l - 1, d, d)) * 0.5,
                normal_array(&mut rng, (l - 1, d)),
            )
            .unwrap();
            let stacks: Vec<HierEmbedStack> = (0..rng.random_range(1..=4))
                .map(|i| HierEmbedStack::from_layers(i, normal_array(&mut rng, (l, d))).unwrap())
                .collect();
            let updated = rectify(&stacks, &transform, eta).unwrap();
            for (before, after) in stacks.iter().zip(&updated) {
                for g in 0..l - 1 {
                    // Gaps are updated bottom-up, so each gap is measured
                    // against its already rectified lower layer.
                    let mut pre = after.layers().to_owned();
                    pre.row_mut(g + 1).assign(&before.layers().row(g + 1));
                    let expected = (1.0 - eta) * residual(&transform, pre.view(), g);
                    let got = residual(&transform, after.layers(), g);
                    worst = worst.max((got - expected).abs());
                    checks += 1;
                }
            }
        }
    }
    outcome(
        worst <= 1e-9,
        format!("eta in {{0.25, 0.5, 1.0}}, {checks} gap checks, worst |after - (1 - eta) before| {worst:.1e} (<= 1e-9)"),
    )
}

// Criterion 7.

fn hierarchy_descent() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut rises = 0;
    let mut ratios = Vec::new();
    for _ in 0..20 {
        let l = rng.random_range(2..=5);
        let d = rng.random_range(1..=8);
        let stacks: Vec<HierEmbedStack> = (0..rng.random_range(1..=6))
            .map(|i| HierEmbedStack::from_layers(i, normal_array(&mut rng, (l, d))).unwrap())
            .collect();
        let transform = LayerTransform::new(
            normal_array(&mut rng, (l - 1, d, d)),
            normal_array(&mut rng, (l - 1, d)),
        )
        .unwrap();
        let initial = hierarchy_loss(&stacks, &transform).unwrap();
        let (fitted, history) = descend_transform(&stacks, &transform, 200, 1.0).unwrap();
        let last = hierarchy_loss(&stacks, &fitted).unwrap();
        assert_eq!(history.len(), 201);
        if last > initial {
            rises += 1;
        }
        ratios.push(last / initial.max(f64::MIN_POSITIVE));
    }
    let worst = ratios.iter().copied().fold(0.0, f64::max);
    outcome(
        rises == 0,
        format!("20 instances x 200 steps, {rises} ended above their start, worst final/initial {worst:.3}"),
    )
}

// Criterion 8.

fn training_sanity() -> Outcome {
    let cfg = RunConfig::new(Task::Overfit);
    let losses: Vec<f64> = Exec::Parallel.map(&[0u64, 1, 2, 3, 4], |&seed| {
        train_overfit(&cfg, seed, "acceptance", Exec::Sequential)
            .unwrap()
            .eval
            .mean_task_loss
    });
    let fitted = losses.iter().filter(|&&l| l < 0.1).count();

    let model = Model::new(ModelConfig::default()).unwrap();
    let examples = gen_random_set(10_000, 16, 80, 4, 8).unwrap();
    let acc = evaluate(&model, &examples, 1, None, Exec::Parallel)
        .unwrap()
        .accuracy;
    let chance = (acc - 0.25).abs() <= 0.05;
    let shown: Vec<String> = losses.iter().map(|l| format!("{l:.4}")).collect();
    outcome(
        fitted >= 4 && chance,
        format!(
            "overfit task loss per seed [{}], {fitted}/5 below 0.1 (>= 4); untrained accuracy {acc:.4} on 10000 balanced examples (0.25 +- 0.05)",
            shown.join(", ")
        ),
    )
}

// Criterion 9.

fn shift_trend() -> Outcome {
    let cfg = RunConfig::new(Task::ShiftClassify);
    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions {
        out: Some(dir.path().into()),
        ..Default::default()
    };
    let report = shift_eval(&cfg, &opts).unwrap();
    for r in &report.rows {
        println!(
            "      {:<8} seed {} accuracy {:.4} segment range {:.4} params {}",
            r.variant, r.seed, r.accuracy, r.segment_range, r.param_count
        );
    }
    let range_ok = report.full_median_range <= 0.15;
    let acc_ok = report.full_median_accuracy >= report.baseline_median_accuracy - 0.01;
    outcome(
        range_ok && acc_ok,
        format!(
            "median full range {:.1} pp (<= 15); median accuracy full {:.4} vs baseline {:.4} (full >= baseline - 1 pp)",
            100.0 * report.full_median_range,
            report.full_median_accuracy,
            report.baseline_median_accuracy
        ),
    )
}

// Criterion 10.

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

fn determinism() -> Outcome {
    let overfit = RunConfig::new(Task::Overfit);
    let mut shift = RunConfig::new(Task::ShiftClassify);
    shift.training.epochs = 2;
    shift.training.seeds = vec![3];
    let mut compared = 0;
    let mut differing = Vec::new();
    for cfg in [overfit, shift] {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        for (dir, exec) in [(&a, Exec::Parallel), (&b, Exec::Sequential)] {
            let opts = RunOptions {
                out: Some(dir.path().into()),
                exec,
                ..Default::default()
            };
            run(&cfg, &opts).unwrap();
        }
        let (fa, fb) = (csv_files(a.path()), csv_files(b.path()));
        if fa.iter().map(|f| &f.0).ne(fb.iter().map(|f| &f.0)) {
            differing.push(format!("{} file sets", cfg.task.as_str()));
        }
        for ((name, x), (_, y)) in fa.iter().zip(&fb) {
            compared += 1;
            if x != y {
                differing.push(name.clone());
            }
        }
    }
    outcome(
        differing.is_empty() && compared > 0,
        format!(
            "{compared} metric CSVs compared across two runs, differing: [{}]",
            differing.join(", ")
        ),
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        (1, "gradient correctness", gradient_correctness),
        (2, "simplex invariants", simplex_invariants),
        (3, "clustering oracle", clustering_oracle),
        (4, "op-count reduction", op_count_proxy),
        (5, "shift detection", shift_detection),
        (6, "rectify contraction", rectify_contraction),
        (7, "hierarchy-loss descent", hierarchy_descent),
        (8, "training sanity", training_sanity),
        (9, "shift robustness vs baseline", shift_trend),
        (10, "determinism", determinism),
    ];
    let selected: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = Vec::new();
    for (n, name, check) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let o = check();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!(
            "{verdict} criterion {n:>2} {name}: {} [{:.1} s]",
            o.detail,
            start.elapsed().as_secs_f64()
        );
        if !o.pass {
            failed.push(n);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
