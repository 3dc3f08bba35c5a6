//! Experiment orchestration: trains and evaluates every seed of a config,
//! then writes metric CSVs, checkpoints and a manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::bench::bench_lengths;
use super::config::{RunConfig, Task};
use super::data::{gen_random_set, gen_shift_stream_draw, ShiftStreamSpec};
use super::metrics::{write_csv, CsvRow, LossCurveRow, MetricName, MetricRecord};
use super::report::{error_histogram, loss_curve, model_layer_similarity};
use crate::error::{invalid, Result};
use crate::memory::Action;
use crate::model::{
    check_matched_budget, evaluate, load_checkpoint, save_checkpoint, train_step, Evaluation,
    Example, ExampleLoss, MemoryController, MemoryEventRecord, Model, ModelConfig, SgdMomentum,
};
use crate::parallel::Exec;

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Overrides `output_dir`.
    pub out: Option<PathBuf>,
    /// Added to every configured seed.
    pub seed_offset: u64,
    pub exec: Exec,
}

impl RunOptions {
    pub fn output_dir(&self, cfg: &RunConfig) -> PathBuf {
        self.out.clone().unwrap_or_else(|| cfg.output_dir.clone())
    }

    pub fn seeds(&self, cfg: &RunConfig) -> Vec<u64> {
        cfg.training
            .seeds
            .iter()
            .map(|s| s.wrapping_add(self.seed_offset))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub created_unix: u64,
    pub task: Task,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    /// Paths relative to the output directory.
    pub metric_files: Vec<String>,
    pub checkpoints: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// SHA-256 of the canonical JSON serialisation of `cfg`.
pub fn config_hash(cfg: &RunConfig) -> String {
    let bytes = serde_json::to_vec(cfg).expect("config serialises");
    hex::encode(Sha256::digest(&bytes))
}

/// `git describe` of the working tree when available, else the crate
/// version.
pub fn version_string() -> String {
    let described = Command::new("git")
        .args(["describe", "--tags", "--always", "--dirty"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty());
    match described {
        Some(d) => format!("v{}-{d}", env!("CARGO_PKG_VERSION")),
        None => format!("v{}", env!("CARGO_PKG_VERSION")),
    }
}

/// Everything one seed of a training run produced.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub model: Model,
    pub metrics: Vec<MetricRecord>,
    pub curve: Vec<LossCurveRow>,
    pub events: Vec<MemoryEventRecord>,
    pub eval: Evaluation,
}

impl SeedRun {
    pub fn segment_range(&self) -> f64 {
        segment_range(&self.eval.per_segment)
    }
}

/// `max - min` of the finite per-segment accuracies.
pub fn segment_range(per_segment: &[f64]) -> f64 {
    let finite = per_segment.iter().copied().filter(|x| x.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| {
        (lo.min(x), hi.max(x))
    });
    if lo > hi {
        0.0
    } else {
        hi - lo
    }
}

struct Trainer {
    model: Model,
    opt: SgdMomentum,
    controller: Option<MemoryController>,
    exec: Exec,
}

impl Trainer {
    fn new(cfg: &RunConfig, model_config: ModelConfig, exec: Exec) -> Result<Self> {
        let model = Model::new(model_config)?.with_objective(cfg.objective.build()?);
        let controller = if model_config.use_memory {
            Some(MemoryController::new(
                cfg.memory,
                model_config.effective_layers(),
                model_config.seed,
            )?)
        } else {
            None
        };
        Ok(Self {
            model,
            opt: SgdMomentum::new(cfg.training.lr, cfg.training.momentum),
            controller,
            exec,
        })
    }

    fn step(&mut self, batch: &[Example]) -> Result<ExampleLoss> {
        let memory = match &mut self.controller {
            Some(c) => {
                c.prepare(&self.model, &batch[0].tokens)?;
                c.memory().cloned()
            }
            None => None,
        };
        let (loss, traces) = train_step(
            &mut self.model,
            batch,
            &mut self.opt,
            memory.as_ref(),
            self.exec,
        )?;
        if let Some(c) = &mut self.controller {
            let mut shifted = false;
            for trace in &traces {
                shifted |= c.observe(trace, loss.task)?.is_some();
            }
            if shifted {
                let eta = c.config().eta;
                for ex in batch {
                    self.model.rectify_tokens(&ex.tokens, eta)?;
                }
            }
        }
        Ok(loss)
    }

    /// Evaluates on a copy of the controller so training state is untouched.
    fn evaluate(&self, examples: &[Example], segments: usize) -> Result<Evaluation> {
        let mut controller = self.controller.clone();
        evaluate(
            &self.model,
            examples,
            segments,
            controller.as_mut(),
            self.exec,
        )
    }

    fn finish(&mut self) -> Result<Vec<MemoryEventRecord>> {
        match &mut self.controller {
            Some(c) => {
                c.finish()?;
                Ok(c.records().to_vec())
            }
            None => Ok(Vec::new()),
        }
    }
}

fn mean(xs: &[f64]) -> f64 {
    crate::parallel::ordered_sum(xs) / xs.len() as f64
}

struct Recorder<'a> {
    run_id: &'a str,
    seed: u64,
    rows: Vec<MetricRecord>,
}

impl Recorder<'_> {
    fn push(&mut self, step: u64, metric_name: MetricName, value: f64, segment: Option<usize>) {
        self.rows.push(MetricRecord {
            run_id: self.run_id.to_string(),
            seed: self.seed,
            step,
            metric_name,
            value,
            segment,
        });
    }

    fn finals(&mut self, step: u64, trainer: &Trainer, eval: &Evaluation) {
        self.push(step, MetricName::TaskLoss, eval.mean_task_loss, None);
        self.push(step, MetricName::Accuracy, eval.accuracy, None);
        for (s, &acc) in eval.per_segment.iter().enumerate() {
            self.push(step, MetricName::SegmentAccuracy, acc, Some(s));
        }
        self.push(
            step,
            MetricName::SegmentRange,
            segment_range(&eval.per_segment),
            None,
        );
        if let Some(c) = &trainer.controller {
            self.push(step, MetricName::ShiftEvents, c.shift_count() as f64, None);
            self.push(
                step,
                MetricName::Reclusters,
                c.recluster_count() as f64,
                None,
            );
            self.push(
                step,
                MetricName::PolicyRetain,
                c.policy().probability(Action::Retain),
                None,
            );
        }
        self.push(
            step,
            MetricName::ParamCount,
            trainer.model.param_count() as f64,
            None,
        );
    }
}

/// The overfit memorisation set for `seed`.
pub fn overfit_set(cfg: &RunConfig, seed: u64) -> Result<Vec<Example>> {
    let t = &cfg.training;
    gen_random_set(
        t.overfit_examples,
        t.overfit_seq_len,
        cfg.model.vocab,
        cfg.model.classes,
        seed,
    )
}

/// Full-batch training on a small random set; one curve row per step.
pub fn train_overfit(cfg: &RunConfig, seed: u64, run_id: &str, exec: Exec) -> Result<SeedRun> {
    let examples = overfit_set(cfg, seed)?;
    let mut trainer = Trainer::new(cfg, ModelConfig { seed, ..cfg.model }, exec)?;
    let mut rec = Recorder {
        run_id,
        seed,
        rows: Vec::new(),
    };
    let mut log = Vec::with_capacity(cfg.training.steps);
    let mut eval = None;
    for step in 1..=cfg.training.steps {
        let loss = trainer.step(&examples)?;
        let e = trainer.evaluate(&examples, 1)?;
        rec.push(step as u64, MetricName::TrainLoss, loss.total, None);
        rec.push(step as u64, MetricName::ValLoss, e.mean_loss, None);
        log.push((loss.total, e.mean_loss));
        eval = Some(e);
    }
    let eval = eval.expect("at least one step");
    rec.finals(cfg.training.steps as u64, &trainer, &eval);
    Ok(SeedRun {
        seed,
        events: trainer.finish()?,
        curve: loss_curve(&log)?,
        metrics: rec.rows,
        model: trainer.model,
        eval,
    })
}

/// The stream spec used for `seed`: topic rules vary with the seed.
pub fn seed_stream(spec: &ShiftStreamSpec, seed: u64) -> ShiftStreamSpec {
    ShiftStreamSpec {
        seed: spec.seed.wrapping_add(seed),
        ..*spec
    }
}

/// Trains on draw 0 of the stream, segment by segment in order with
/// examples shuffled within each segment, and evaluates on draw 1.
pub fn train_shift(
    cfg: &RunConfig,
    model_config: ModelConfig,
    seed: u64,
    run_id: &str,
    exec: Exec,
) -> Result<SeedRun> {
    let spec = seed_stream(&cfg.stream, seed);
    let train = gen_shift_stream_draw(&spec, 0)?;
    let held_out = gen_shift_stream_draw(&spec, 1)?;
    let mut trainer = Trainer::new(
        cfg,
        ModelConfig {
            seed,
            ..model_config
        },
        exec,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let mut rec = Recorder {
        run_id,
        seed,
        rows: Vec::new(),
    };
    let per_segment = spec.examples_per_segment();
    let mut log = Vec::with_capacity(cfg.training.epochs);
    let mut eval = None;
    for epoch in 1..=cfg.training.epochs {
        let mut losses = Vec::new();
        for segment in train.examples.chunks(per_segment) {
            let mut order: Vec<&Example> = segment.iter().collect();
            order.shuffle(&mut rng);
            for batch in order.chunks(cfg.training.batch_size) {
                let batch: Vec<Example> = batch.iter().map(|&e| e.clone()).collect();
                losses.push(trainer.step(&batch)?.total);
            }
        }
        let e = trainer.evaluate(&held_out.examples, spec.segments)?;
        let train_loss = mean(&losses);
        rec.push(epoch as u64, MetricName::TrainLoss, train_loss, None);
        rec.push(epoch as u64, MetricName::ValLoss, e.mean_loss, None);
        log.push((train_loss, e.mean_loss));
        eval = Some(e);
    }
    let eval = eval.expect("at least one epoch");
    rec.finals(cfg.training.epochs as u64, &trainer, &eval);
    Ok(SeedRun {
        seed,
        events: trainer.finish()?,
        curve: loss_curve(&log)?,
        metrics: rec.rows,
        model: trainer.model,
        eval,
    })
}

fn run_id(task: &str, hash: &str, seed: u64) -> String {
    format!("{task}-{}-s{seed}", &hash[..12])
}

fn created_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

struct Outputs {
    dir: PathBuf,
    metric_files: Vec<String>,
    checkpoints: Vec<String>,
}

impl Outputs {
    fn new(dir: PathBuf) -> Result<Self> {
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            metric_files: Vec::new(),
            checkpoints: Vec::new(),
        })
    }

    fn csv<T: CsvRow>(&mut self, name: String, rows: &[T]) -> Result<()> {
        write_csv(&self.dir.join(&name), rows)?;
        self.metric_files.push(name);
        Ok(())
    }

    fn seed_run(&mut self, prefix: &str, run: &SeedRun) -> Result<()> {
        let stem = format!("{prefix}_seed{}", run.seed);
        self.csv(format!("{stem}_metrics.csv"), &run.metrics)?;
        self.csv(format!("{stem}_loss_curve.csv"), &run.curve)?;
        if run.model.config.use_memory {
            self.csv(format!("{stem}_memory_events.csv"), &run.events)?;
        }
        let ckpt = format!("{stem}_model.json");
        save_checkpoint(&run.model, &self.dir.join(&ckpt))?;
        self.checkpoints.push(ckpt);
        Ok(())
    }

    fn manifest(self, cfg: &RunConfig, seeds: Vec<u64>) -> Result<RunManifest> {
        let manifest = RunManifest {
            version: version_string(),
            created_unix: created_unix(),
            task: cfg.task,
            config_hash: config_hash(cfg),
            seeds,
            metric_files: self.metric_files,
            checkpoints: self.checkpoints,
        };
        fs::write(
            self.dir.join(MANIFEST_FILE),
            serde_json::to_vec_pretty(&manifest)?,
        )?;
        Ok(manifest)
    }
}

fn collect<T>(results: Vec<Result<T>>) -> Result<Vec<T>> {
    results.into_iter().collect()
}

/// Runs the configured task for every seed and persists the results.
pub fn run(cfg: &RunConfig, opts: &RunOptions) -> Result<RunManifest> {
    cfg.check().map_err(|(_, m)| invalid(m))?;
    let seeds = opts.seeds(cfg);
    let hash = config_hash(cfg);
    let task = cfg.task.as_str();
    let mut out = Outputs::new(opts.output_dir(cfg))?;
    match cfg.task {
        Task::LengthBench => {
            let rows = bench_lengths(&cfg.model, &cfg.bench, seeds[0])?;
            out.csv(format!("{task}.csv"), &rows)?;
        }
        Task::Overfit | Task::ShiftClassify => {
            let runs = collect(opts.exec.map(&seeds, |&seed| {
                let id = run_id(task, &hash, seed);
                match cfg.task {
                    Task::Overfit => train_overfit(cfg, seed, &id, Exec::Sequential),
                    _ => train_shift(cfg, cfg.model, seed, &id, Exec::Sequential),
                }
            }))?;
            for r in &runs {
                out.seed_run(task, r)?;
            }
        }
    }
    out.manifest(cfg, seeds)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ShiftEvalRow {
    pub variant: &'static str,
    pub seed: u64,
    pub accuracy: f64,
    pub segment_range: f64,
    pub param_count: usize,
}

impl CsvRow for ShiftEvalRow {
    const HEADER: &'static [&'static str] = &[
        "variant",
        "seed",
        "accuracy",
        "segment_range",
        "param_count",
    ];
}

#[derive(Clone, Debug)]
pub struct ShiftEvalReport {
    pub rows: Vec<ShiftEvalRow>,
    pub full_median_accuracy: f64,
    pub baseline_median_accuracy: f64,
    pub full_median_range: f64,
    pub manifest: RunManifest,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Trains the configured model and its parameter-matched static baseline
/// on the shift stream for every seed and compares them.
pub fn shift_eval(cfg: &RunConfig, opts: &RunOptions) -> Result<ShiftEvalReport> {
    let cfg = RunConfig {
        task: Task::ShiftClassify,
        ..cfg.clone()
    };
    cfg.check().map_err(|(_, m)| invalid(m))?;
    let full = cfg.model;
    let baseline = full.matched_baseline();
    check_matched_budget(&full, &baseline)?;
    let seeds = opts.seeds(&cfg);
    let hash = config_hash(&cfg);
    let jobs: Vec<(&'static str, ModelConfig, u64)> = [("full", full), ("baseline", baseline)]
        .into_iter()
        .flat_map(|(name, mc)| seeds.iter().map(move |&s| (name, mc, s)))
        .collect();
    let runs = collect(opts.exec.map(&jobs, |&(name, mc, seed)| {
        train_shift(
            &cfg,
            mc,
            seed,
            &run_id(&format!("shift_{name}"), &hash, seed),
            Exec::Sequential,
        )
    }))?;

    let mut out = Outputs::new(opts.output_dir(&cfg))?;
    let mut rows = Vec::with_capacity(runs.len());
    for ((name, _, _), r) in jobs.iter().zip(&runs) {
        out.seed_run(&format!("shift_{name}"), r)?;
        rows.push(ShiftEvalRow {
            variant: name,
            seed: r.seed,
            accuracy: r.eval.accuracy,
            segment_range: r.segment_range(),
            param_count: r.model.param_count(),
        });
    }
    out.csv("shift_eval_summary.csv".into(), &rows)?;
    let pick = |variant: &str, f: fn(&ShiftEvalRow) -> f64| {
        median(
            &rows
                .iter()
                .filter(|r| r.variant == variant)
                .map(f)
                .collect::<Vec<_>>(),
        )
    };
    Ok(ShiftEvalReport {
        full_median_accuracy: pick("full", |r| r.accuracy),
        baseline_median_accuracy: pick("baseline", |r| r.accuracy),
        full_median_range: pick("full", |r| r.segment_range),
        manifest: out.manifest(&cfg, seeds)?,
        rows,
    })
}

/// Per-category error rates: per segment for the shift task, per class
/// otherwise.
fn error_rates(model: &Model, examples: &[Example], by_class: bool) -> Result<Vec<f64>> {
    let (examples, categories): (Vec<Example>, usize) = if by_class {
        let relabelled = examples
            .iter()
            .map(|e| Example {
                segment: e.label,
                ..e.clone()
            })
            .collect();
        (relabelled, model.config.classes)
    } else {
        (
            examples.to_vec(),
            examples.iter().map(|e| e.segment + 1).max().unwrap_or(1),
        )
    };
    let eval = evaluate(model, &examples, categories, None, Exec::Parallel)?;
    Ok(eval
        .per_segment
        .iter()
        .filter(|a| a.is_finite())
        .map(|a| 1.0 - a)
        .collect())
}

/// Writes layer-similarity and error-histogram tables for every seed
/// checkpoint a previous `run` left in the output directory.
pub fn report(cfg: &RunConfig, opts: &RunOptions) -> Result<Vec<PathBuf>> {
    cfg.check().map_err(|(_, m)| invalid(m))?;
    let dir = opts.output_dir(cfg);
    let task = cfg.task.as_str();
    if cfg.task == Task::LengthBench {
        return Err(invalid(
            "length_bench runs have no checkpoints to report on",
        ));
    }
    let mut written = Vec::new();
    for seed in opts.seeds(cfg) {
        let stem = format!("{task}_seed{seed}");
        let ckpt = dir.join(format!("{stem}_model.json"));
        if !ckpt.exists() {
            return Err(invalid(format!(
                "missing checkpoint {}; run the task first",
                ckpt.display()
            )));
        }
        let model = load_checkpoint(&ckpt)?;
        let (examples, by_class) = match cfg.task {
            Task::ShiftClassify => (
                gen_shift_stream_draw(&seed_stream(&cfg.stream, seed), 1)?.examples,
                false,
            ),
            _ => (overfit_set(cfg, seed)?, true),
        };
        if model.config.effective_layers() >= 2 {
            let sequences: Vec<Vec<usize>> = examples.iter().map(|e| e.tokens.clone()).collect();
            let path = dir.join(format!("{stem}_layer_similarity.csv"));
            write_csv(&path, &model_layer_similarity(&model, &sequences)?)?;
            written.push(path);
        }
        let path = dir.join(format!("{stem}_error_histogram.csv"));
        write_csv(
            &path,
            &error_histogram(&error_rates(&model, &examples, by_class)?)?,
        )?;
        written.push(path);
    }
    Ok(written)
}

/// Reads a manifest written by [`run`].
pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    Ok(serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?)
}
