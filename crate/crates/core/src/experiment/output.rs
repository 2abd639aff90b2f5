use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ExperimentError, ExperimentResult};
use crate::strategy::RunTrace;

/// Fixed trace CSV header; `metric_2` is blank for single-metric functionals.
pub const TRACE_COLUMNS: [&str; 10] = [
    "step",
    "selected_index",
    "z",
    "H",
    "J_min",
    "J_selected",
    "epsilon",
    "gain",
    "metric_1",
    "metric_2",
];

pub(crate) fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub(crate) fn metric(metrics: &[f64], k: usize) -> String {
    opt(metrics.get(k))
}

pub fn trace_csv(trace: &RunTrace) -> ExperimentResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| ExperimentError::Config(format!("csv encoding failed: {e}"));
    w.write_record(TRACE_COLUMNS).map_err(csv_err)?;
    for r in &trace.rows {
        w.write_record([
            r.step.to_string(),
            opt(r.selected_index),
            opt(r.z),
            r.h.to_string(),
            opt(r.j_min),
            opt(r.j_selected),
            opt(r.epsilon),
            opt(r.gain),
            metric(&r.metrics, 0),
            metric(&r.metrics, 1),
        ])
        .map_err(csv_err)?;
    }
    w.into_inner()
        .map_err(|e| ExperimentError::Config(format!("csv encoding failed: {e}")))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> ExperimentResult<()> {
    std::fs::write(path, bytes).map_err(|e| ExperimentError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> ExperimentResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub(crate) fn create_dir(path: &Path) -> ExperimentResult<()> {
    std::fs::create_dir_all(path).map_err(|e| ExperimentError::io(path, e))
}

/// Linear-interpolation quantile (type 7) of unsorted data; NaN if empty.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

impl Quantiles {
    pub fn of(values: &[f64]) -> Self {
        Quantiles {
            min: quantile(values, 0.0),
            q25: quantile(values, 0.25),
            median: quantile(values, 0.5),
            q75: quantile(values, 0.75),
            max: quantile(values, 1.0),
        }
    }
}
