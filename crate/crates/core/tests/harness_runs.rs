//! End-to-end runs, file audits and data-layout checks.

use std::fs;
use std::path::Path;

use hiermem::harness::{
    error_histogram, gen_shift_stream, run, run::read_manifest, RunConfig, RunOptions,
    ShiftStreamSpec, Task,
};
use hiermem::model::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use hiermem::Error;

fn opts(dir: &Path) -> RunOptions {
    RunOptions {
        out: Some(dir.to_path_buf()),
        ..Default::default()
    }
}

#[test]
fn shift_run_covers_every_segment_for_every_seed() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::new(Task::ShiftClassify);
    cfg.training.epochs = 1;
    let manifest = run(&cfg, &opts(dir.path())).unwrap();
    assert_eq!(manifest.seeds, vec![0, 1, 2, 3, 4]);
    let metric_files: Vec<&String> = manifest
        .metric_files
        .iter()
        .filter(|f| f.ends_with("_metrics.csv"))
        .collect();
    assert_eq!(metric_files.len(), 5);
    for file in metric_files {
        let mut reader = csv::Reader::from_path(dir.path().join(file)).unwrap();
        let headers = reader.headers().unwrap().clone();
        assert_eq!(
            headers.iter().collect::<Vec<_>>(),
            ["run_id", "seed", "step", "metric_name", "value", "segment"]
        );
        let mut segments: Vec<usize> = reader
            .records()
            .map(|r| r.unwrap())
            .filter(|r| &r[3] == "segment_accuracy")
            .map(|r| r[5].parse().unwrap())
            .collect();
        segments.sort_unstable();
        assert_eq!(segments, (0..10).collect::<Vec<_>>(), "{file}");
    }
}

#[test]
fn overfit_run_writes_manifest_and_curve() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::new(Task::Overfit);
    cfg.training.seeds = vec![2];
    cfg.training.steps = 30;
    let manifest = run(&cfg, &opts(dir.path())).unwrap();
    let stored = read_manifest(dir.path()).unwrap();
    assert_eq!(stored, manifest);
    assert_eq!(manifest.config_hash.len(), 64);
    assert!(manifest.version.starts_with('v'));
    for f in manifest.metric_files.iter().chain(&manifest.checkpoints) {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let curve = fs::read_to_string(dir.path().join("overfit_seed2_loss_curve.csv")).unwrap();
    let mut lines = curve.lines();
    assert_eq!(lines.next(), Some("epoch,train_loss,val_loss"));
    assert_eq!(lines.count(), 30);
    // Timestamps live only in the manifest.
    assert!(fs::read_to_string(dir.path().join("manifest.json"))
        .unwrap()
        .contains("created_unix"));
}

#[test]
fn config_hash_tracks_the_config() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut cfg = RunConfig::new(Task::Overfit);
    cfg.training.seeds = vec![0];
    cfg.training.steps = 5;
    let h1 = run(&cfg, &opts(a.path())).unwrap().config_hash;
    cfg.training.lr = 0.02;
    let h2 = run(&cfg, &opts(b.path())).unwrap().config_hash;
    assert_ne!(h1, h2);
}

#[test]
fn checkpoint_version_mismatch_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    let model = Model::new(ModelConfig {
        d: 4,
        vocab: 10,
        ..Default::default()
    })
    .unwrap();
    save_checkpoint(&model, &path).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap().params, model.params);
    let mut raw: serde_json::Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
    raw["format_version"] = serde_json::json!(99);
    fs::write(&path, serde_json::to_vec(&raw).unwrap()).unwrap();
    assert!(matches!(
        load_checkpoint(&path),
        Err(Error::VersionMismatch { found: 99, .. })
    ));
    raw.as_object_mut().unwrap().remove("format_version");
    fs::write(&path, serde_json::to_vec(&raw).unwrap()).unwrap();
    assert!(load_checkpoint(&path).is_err());
}

#[test]
fn stream_boundaries_match_offset_arithmetic() {
    let spec = ShiftStreamSpec::default();
    let data = gen_shift_stream(&spec).unwrap();
    let seq_len = spec.seq_len;
    let per_segment_tokens = spec.tokens_per_segment;
    let mut offsets = Vec::new();
    let mut token = 0;
    for (i, ex) in data.examples.iter().enumerate() {
        if i > 0 && ex.segment != data.examples[i - 1].segment {
            offsets.push(token);
        }
        assert_eq!(ex.tokens.len(), seq_len);
        assert_eq!(ex.segment, token / per_segment_tokens);
        let topic = &data.topics[ex.segment];
        assert!(ex.tokens.iter().all(|t| topic.vocab.contains(t)));
        token += seq_len;
    }
    assert_eq!(token, spec.segments * per_segment_tokens);
    assert_eq!(data.boundaries, offsets);
    assert_eq!(
        data.boundaries,
        vec![640, 1280, 1920, 2560, 3200, 3840, 4480, 5120, 5760]
    );
    let example_offsets: Vec<usize> = offsets.iter().map(|o| o / seq_len).collect();
    assert_eq!(data.example_boundaries, example_offsets);
    for (a, b) in data.topics.iter().zip(data.topics.iter().skip(1)) {
        assert!(a.vocab.end <= b.vocab.start);
    }
}

#[test]
fn histogram_matches_integer_binning() {
    let rates_milli: Vec<u32> = (0..=1000)
        .step_by(7)
        .chain([0, 50, 100, 950, 999, 1000])
        .collect();
    let rates: Vec<f64> = rates_milli.iter().map(|&k| f64::from(k) / 1000.0).collect();
    let mut want = [0usize; 20];
    for &k in &rates_milli {
        want[((k / 50) as usize).min(19)] += 1;
    }
    let got: Vec<usize> = error_histogram(&rates)
        .unwrap()
        .iter()
        .map(|b| b.count)
        .collect();
    assert_eq!(got, want);
    assert_eq!(got.iter().sum::<usize>(), rates.len());
}

#[test]
fn shipped_configs_are_valid() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        hiermem::harness::load_config(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        seen += 1;
    }
    assert!(seen >= 3);
}
