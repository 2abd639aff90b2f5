use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::output::{create_dir, metric, opt, trace_csv, write_bytes, write_json, Quantiles};
use super::{ExperimentConfig, ExperimentError, ExperimentResult};
use crate::diagnostics::{averaged_supermartingale, AveragedSupermartingale};
use crate::functionals::{Functional, FunctionalSpec};
use crate::grid::Domain;
use crate::strategy::{metric_names, run_sur, RunTrace};

/// Tolerance for J(X_{n+1}) ≤ min J + ε_n in the summary.
pub const QUASI_SUR_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub name: String,
    /// What the final values are divided by in `normalized_final`.
    pub normalization: String,
    pub initial: Quantiles,
    pub final_value: Quantiles,
    pub normalized_final: Quantiles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub functional: FunctionalSpec,
    pub label: String,
    pub replications: usize,
    pub n_steps: usize,
    /// Quantiles of H_n across replications, one entry per step n.
    pub h_quantiles: Vec<Quantiles>,
    /// Quantiles of H_final / H_0 (0 when both vanish).
    pub h_ratio: Quantiles,
    pub metrics: Vec<MetricSummary>,
    pub averaged_supermartingale: AveragedSupermartingale,
    pub quasi_sur_violations: usize,
    pub variance_violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub files: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub traces: Vec<RunTrace>,
    pub summary: Summary,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone)]
pub struct CompareOutcome {
    /// `traces[s][r]`: spec `s`, replication `r`.
    pub traces: Vec<Vec<RunTrace>>,
    pub summary: CompareSummary,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareEntry {
    pub functional: FunctionalSpec,
    pub label: String,
    pub median_h: Vec<f64>,
    pub median_h_nonincreasing: bool,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareSummary {
    pub replications: usize,
    pub entries: Vec<CompareEntry>,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else if num > 0.0 {
        f64::INFINITY
    } else {
        0.0
    }
}

fn range(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    max - min
}

/// Runs `config.replications` seeded runs of `spec` (in parallel).
pub fn run_replications(
    config: &ExperimentConfig,
    domain: &Domain,
    spec: &FunctionalSpec,
) -> ExperimentResult<Vec<RunTrace>> {
    (0..config.replications)
        .into_par_iter()
        .map(|r| {
            let strategy = config.strategy_for(spec, config.replication_seed(r));
            run_sur(domain, &config.kernel, config.prior_mean, &strategy)
                .map_err(ExperimentError::from)
        })
        .collect()
}

pub fn summarize(
    spec: &FunctionalSpec,
    domain: &Domain,
    traces: &[RunTrace],
) -> ExperimentResult<Summary> {
    let h_traces: Vec<Vec<f64>> = traces.iter().map(RunTrace::h_series).collect();
    let steps = h_traces.first().map_or(0, Vec::len);
    let h_quantiles = (0..steps)
        .map(|n| Quantiles::of(&h_traces.iter().map(|t| t[n]).collect::<Vec<_>>()))
        .collect();
    let h_ratio = Quantiles::of(
        &h_traces
            .iter()
            .map(|t| ratio(*t.last().unwrap(), t[0]))
            .collect::<Vec<_>>(),
    );
    let names = metric_names(&spec.functional);
    let metrics = names
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let initial: Vec<f64> = traces.iter().map(|t| t.rows[0].metrics[k]).collect();
            let last: Vec<f64> = traces
                .iter()
                .map(|t| t.rows.last().unwrap().metrics[k])
                .collect();
            let (normalization, normalized): (&str, Vec<f64>) = match spec.functional {
                Functional::Ibv { .. } | Functional::Vev { .. } => (
                    "total_weight",
                    last.iter().map(|v| v / domain.total_weight()).collect(),
                ),
                Functional::Kg => (
                    "sample_path_range",
                    traces
                        .iter()
                        .zip(&last)
                        .map(|(t, v)| ratio(*v, range(&t.truth)))
                        .collect(),
                ),
                Functional::Ei => (
                    "initial_value",
                    last.iter()
                        .zip(&initial)
                        .map(|(v, i)| ratio(*v, *i))
                        .collect(),
                ),
            };
            MetricSummary {
                name: name.to_string(),
                normalization: normalization.to_string(),
                initial: Quantiles::of(&initial),
                final_value: Quantiles::of(&last),
                normalized_final: Quantiles::of(&normalized),
            }
        })
        .collect();
    Ok(Summary {
        functional: *spec,
        label: spec.functional.label().to_string(),
        replications: traces.len(),
        n_steps: steps.saturating_sub(1),
        h_quantiles,
        h_ratio,
        metrics,
        averaged_supermartingale: averaged_supermartingale(&h_traces)?,
        quasi_sur_violations: traces
            .iter()
            .map(|t| t.quasi_sur_violations(QUASI_SUR_TOL).len())
            .sum(),
        variance_violations: traces.iter().map(|t| t.variance_violations).sum(),
    })
}

fn manifest(config: &ExperimentConfig, command: &str, files: Vec<String>) -> Manifest {
    Manifest {
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: config.hash(),
        config: config.clone(),
        seeds: (0..config.replications)
            .map(|r| config.replication_seed(r))
            .collect(),
        files,
    }
}

fn trace_name(r: usize) -> String {
    format!("trace_{r:04}.csv")
}

/// `run`: replications, one trace CSV each, `summary.json`, `manifest.json`.
pub fn cmd_run(config: &ExperimentConfig) -> ExperimentResult<RunOutcome> {
    let (domain, spec) = config.validate_run()?;
    let dir = config.output_dir.clone();
    create_dir(&dir)?;
    let traces = (0..config.replications)
        .into_par_iter()
        .map(|r| {
            let strategy = config.strategy_for(&spec, config.replication_seed(r));
            let trace = run_sur(&domain, &config.kernel, config.prior_mean, &strategy)?;
            write_bytes(&dir.join(trace_name(r)), &trace_csv(&trace)?)?;
            Ok(trace)
        })
        .collect::<ExperimentResult<Vec<_>>>()?;
    let summary = summarize(&spec, &domain, &traces)?;
    write_json(&dir.join("summary.json"), &summary)?;
    let mut files: Vec<String> = (0..config.replications).map(trace_name).collect();
    files.push("summary.json".into());
    write_json(&dir.join("manifest.json"), &manifest(config, "run", files))?;
    Ok(RunOutcome {
        traces,
        summary,
        output_dir: dir,
    })
}

fn median_nonincreasing(median: &[f64]) -> bool {
    median
        .windows(2)
        .all(|w| w[1] <= w[0] + 1e-12 * w[0].abs().max(1.0))
}

pub const COMPARE_COLUMNS: [&str; 8] = [
    "replication",
    "spec",
    "functional",
    "step",
    "selected_index",
    "H",
    "metric_1",
    "metric_2",
];

fn compare_csv(specs: &[FunctionalSpec], traces: &[Vec<RunTrace>]) -> ExperimentResult<Vec<u8>> {
    let csv_err = |e: csv::Error| ExperimentError::Config(format!("csv encoding failed: {e}"));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(COMPARE_COLUMNS).map_err(csv_err)?;
    let reps = traces.first().map_or(0, Vec::len);
    for r in 0..reps {
        for (s, spec) in specs.iter().enumerate() {
            for row in &traces[s][r].rows {
                w.write_record([
                    r.to_string(),
                    s.to_string(),
                    spec.functional.label().to_string(),
                    row.step.to_string(),
                    opt(row.selected_index),
                    row.h.to_string(),
                    metric(&row.metrics, 0),
                    metric(&row.metrics, 1),
                ])
                .map_err(csv_err)?;
            }
        }
    }
    w.into_inner()
        .map_err(|e| ExperimentError::Config(format!("csv encoding failed: {e}")))
}

/// `compare`: every functional on the same truths (replication seeds are
/// shared across specs), written as one long-format `compare.csv`.
pub fn cmd_compare(config: &ExperimentConfig) -> ExperimentResult<CompareOutcome> {
    let (domain, specs) = config.validate_compare()?;
    let dir = config.output_dir.clone();
    create_dir(&dir)?;
    let traces = specs
        .iter()
        .map(|spec| run_replications(config, &domain, spec))
        .collect::<ExperimentResult<Vec<_>>>()?;
    write_bytes(&dir.join("compare.csv"), &compare_csv(&specs, &traces)?)?;
    let entries = specs
        .iter()
        .zip(&traces)
        .map(|(spec, t)| {
            let summary = summarize(spec, &domain, t)?;
            let median_h: Vec<f64> = summary.h_quantiles.iter().map(|q| q.median).collect();
            Ok(CompareEntry {
                functional: *spec,
                label: spec.functional.label().to_string(),
                median_h_nonincreasing: median_nonincreasing(&median_h),
                median_h,
                summary,
            })
        })
        .collect::<ExperimentResult<Vec<_>>>()?;
    let summary = CompareSummary {
        replications: config.replications,
        entries,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    let files = vec!["compare.csv".to_string(), "summary.json".to_string()];
    write_json(
        &dir.join("manifest.json"),
        &manifest(config, "compare", files),
    )?;
    Ok(CompareOutcome {
        traces,
        summary,
        output_dir: dir,
    })
}

pub(crate) fn manifest_for_check(config: &ExperimentConfig, dir: &Path) -> ExperimentResult<()> {
    write_json(
        &dir.join("manifest.json"),
        &manifest(config, "check", vec!["check_report.json".into()]),
    )
}
