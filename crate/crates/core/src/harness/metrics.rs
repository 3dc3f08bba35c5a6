//! Metric records and headered CSV output.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::model::MemoryEventRecord;

/// The closed set of metric names a run may emit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    TrainLoss,
    ValLoss,
    TaskLoss,
    Accuracy,
    SegmentAccuracy,
    SegmentRange,
    ShiftEvents,
    Reclusters,
    PolicyRetain,
    ParamCount,
}

impl MetricName {
    pub const ALL: [MetricName; 10] = [
        MetricName::TrainLoss,
        MetricName::ValLoss,
        MetricName::TaskLoss,
        MetricName::Accuracy,
        MetricName::SegmentAccuracy,
        MetricName::SegmentRange,
        MetricName::ShiftEvents,
        MetricName::Reclusters,
        MetricName::PolicyRetain,
        MetricName::ParamCount,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MetricName::TrainLoss => "train_loss",
            MetricName::ValLoss => "val_loss",
            MetricName::TaskLoss => "task_loss",
            MetricName::Accuracy => "accuracy",
            MetricName::SegmentAccuracy => "segment_accuracy",
            MetricName::SegmentRange => "segment_range",
            MetricName::ShiftEvents => "shift_events",
            MetricName::Reclusters => "reclusters",
            MetricName::PolicyRetain => "policy_retain",
            MetricName::ParamCount => "param_count",
        }
    }
}

impl fmt::Display for MetricName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetricName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MetricName::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| invalid(format!("unknown metric name {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRecord {
    pub run_id: String,
    pub seed: u64,
    pub step: u64,
    pub metric_name: MetricName,
    pub value: f64,
    pub segment: Option<usize>,
}

/// A row type with a fixed CSV header.
pub trait CsvRow: Serialize {
    const HEADER: &'static [&'static str];
}

impl CsvRow for MetricRecord {
    const HEADER: &'static [&'static str] =
        &["run_id", "seed", "step", "metric_name", "value", "segment"];
}

impl CsvRow for MemoryEventRecord {
    const HEADER: &'static [&'static str] =
        &["step", "divergence", "action", "block_count", "reward"];
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossCurveRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

impl CsvRow for LossCurveRow {
    const HEADER: &'static [&'static str] = &["epoch", "train_loss", "val_loss"];
}

/// Writes `rows` under their declared header, even when `rows` is empty.
pub fn write_csv<T: CsvRow>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    w.write_record(T::HEADER)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
