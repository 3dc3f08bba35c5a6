//! Synthetic data, experiment runner, metric files and report tables.

pub mod bench;
pub mod config;
pub mod data;
pub mod metrics;
pub mod report;
pub mod run;

pub use bench::{bench_lengths, BenchConfig, BenchRow};
pub use config::{load_config, parse_config, ObjectiveSettings, RunConfig, Task, TrainingConfig};
pub use data::{
    gen_random_set, gen_shift_stream, gen_shift_stream_draw, ShiftDataset, ShiftStreamSpec, Topic,
};
pub use metrics::{write_csv, CsvRow, LossCurveRow, MetricName, MetricRecord};
pub use report::{
    error_histogram, layer_similarity_report, loss_curve, model_layer_similarity, HistogramBin,
    LayerSimilarityRow,
};
pub use run::{
    report, run, shift_eval, RunManifest, RunOptions, SeedRun, ShiftEvalReport, ShiftEvalRow,
};
