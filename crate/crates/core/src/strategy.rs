//! The (quasi-)SUR sequential design loop against a simulated truth.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::criteria::evaluate_candidates;
use crate::diagnostics::{
    ei_consistency, ibv_consistency, kg_consistency, measure_increment, vev_consistency,
    MeasureIncrement, VARIANCE_MONOTONICITY_TOL,
};
use crate::error::{Error, Result};
use crate::functionals::{eval, Functional, FunctionalSpec, FunctionalValue};
use crate::grid::{
    build_prior, sample_path, simulate_observation, Domain, GaussianMeasure, KernelSpec,
    Observation,
};
use crate::rng::{derive_seed, rng_from_seed};

const STREAM_TRUTH: u64 = 1;
const STREAM_FUNCTIONAL: u64 = 2;
const STREAM_NOISE: u64 = 3;
const STREAM_SELECT: u64 = 4;
const STREAM_INIT_NOISE: u64 = 5;

/// Slack ε_n allowed between the selected criterion value and the minimum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Epsilon {
    /// ε_n = value; only 0 is accepted since ε_n must vanish.
    Constant { value: f64 },
    /// ε_n = c / n, with n the number of observations made so far (at least 1).
    Harmonic { c: f64 },
}

impl Default for Epsilon {
    fn default() -> Self {
        Epsilon::Constant { value: 0.0 }
    }
}

impl Epsilon {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Epsilon::Constant { value } if value == 0.0 => Ok(()),
            Epsilon::Constant { value } => Err(Error::Parameter(format!(
                "a constant epsilon must be 0 (it has to vanish), got {value}"
            ))),
            Epsilon::Harmonic { c } if c.is_finite() && c >= 0.0 => Ok(()),
            Epsilon::Harmonic { c } => Err(Error::Parameter(format!(
                "harmonic epsilon needs a finite c >= 0, got {c}"
            ))),
        }
    }

    pub fn at(&self, n_observations: usize) -> f64 {
        match *self {
            Epsilon::Constant { value } => value,
            Epsilon::Harmonic { c } => c / n_observations.max(1) as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllCandidates {
    All,
}

/// Candidate set: the whole grid, or an explicit list of indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Candidates {
    All(AllCandidates),
    Subset(Vec<usize>),
}

impl Default for Candidates {
    fn default() -> Self {
        Candidates::All(AllCandidates::All)
    }
}

impl Candidates {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn resolve(&self, n: usize) -> Result<Vec<usize>> {
        match self {
            Candidates::All(_) => Ok((0..n).collect()),
            Candidates::Subset(list) => {
                if list.is_empty() {
                    return Err(Error::Parameter("candidate list is empty".into()));
                }
                if let Some(bad) = list.iter().find(|&&i| i >= n) {
                    return Err(Error::Parameter(format!(
                        "candidate index {bad} out of range (grid has {n} points)"
                    )));
                }
                Ok(list.clone())
            }
        }
    }
}

fn default_n_init() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub functional: FunctionalSpec,
    /// Initial observations at strided grid indices.
    #[serde(default = "default_n_init")]
    pub n_init: usize,
    pub n_steps: usize,
    #[serde(default)]
    pub epsilon: Epsilon,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub candidates: Candidates,
}

impl StrategyConfig {
    pub fn new(functional: FunctionalSpec, n_steps: usize, seed: u64) -> Self {
        Self {
            functional,
            n_init: default_n_init(),
            n_steps,
            epsilon: Epsilon::default(),
            seed,
            candidates: Candidates::default(),
        }
    }

    pub fn validate(&self, domain: &Domain) -> Result<()> {
        self.functional.validate()?;
        self.epsilon.validate()?;
        self.candidates.resolve(domain.len())?;
        if self.n_init > domain.len() {
            return Err(Error::Parameter(format!(
                "n_init = {} exceeds the grid size {}",
                self.n_init,
                domain.len()
            )));
        }
        if matches!(self.functional.functional, Functional::Ei) {
            if !domain.is_noiseless() {
                return Err(Error::Parameter(
                    "expected improvement requires noiseless observations (noise_sd = 0 everywhere)".into(),
                ));
            }
            if self.n_init == 0 {
                return Err(Error::Parameter(
                    "expected improvement needs at least one initial observation".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Strided, deterministic initial design.
pub fn initial_design(n_points: usize, n_init: usize) -> Vec<usize> {
    (0..n_init)
        .map(|i| (((2 * i + 1) * n_points) / (2 * n_init)).min(n_points - 1))
        .collect()
}

/// One row per step n = 0..=n_steps. The decision fields are absent on the
/// last row, which only records the final state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub selected_index: Option<usize>,
    pub z: Option<f64>,
    /// H_n, clamped at zero.
    pub h: f64,
    pub h_stderr: f64,
    pub j_min: Option<f64>,
    pub j_selected: Option<f64>,
    pub epsilon: Option<f64>,
    pub gain: Option<f64>,
    /// Functional-specific consistency metrics, see [`metric_names`].
    pub metrics: Vec<f64>,
    /// Change from this posterior to the next one.
    pub increment: Option<MeasureIncrement>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub functional: FunctionalSpec,
    pub seed: u64,
    pub initial_design: Vec<Observation>,
    pub rows: Vec<TraceRow>,
    pub truth: Vec<f64>,
    pub final_mean: Vec<f64>,
    pub final_variance: Vec<f64>,
    /// Count of (step, index) pairs where a posterior variance increased.
    pub variance_violations: usize,
}

impl RunTrace {
    pub fn h_series(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.h).collect()
    }

    /// Rows where J(X_{n+1}) > min J + ε_n + `tol`.
    pub fn quasi_sur_violations(&self, tol: f64) -> Vec<usize> {
        self.rows
            .iter()
            .filter_map(|r| match (r.j_selected, r.j_min, r.epsilon) {
                (Some(js), Some(jm), Some(e)) if js > jm + e + tol => Some(r.step),
                _ => None,
            })
            .collect()
    }

    pub fn selections(&self) -> Vec<usize> {
        self.rows.iter().filter_map(|r| r.selected_index).collect()
    }
}

/// Names of the consistency metrics recorded for a functional.
pub fn metric_names(functional: &Functional) -> &'static [&'static str] {
    match functional {
        Functional::Ibv { .. } => &["l2_prob", "l2_plugin"],
        Functional::Vev { .. } => &["volume_gap"],
        Functional::Kg => &["max_gap"],
        Functional::Ei => &["gap_best", "gap_mean"],
    }
}

pub fn consistency_metrics(
    functional: &FunctionalSpec,
    truth: &[f64],
    measure: &GaussianMeasure,
    domain: &Domain,
) -> Result<Vec<f64>> {
    Ok(match functional.functional {
        Functional::Ibv { threshold } => {
            let (a, b) = ibv_consistency(truth, measure, domain, threshold)?;
            vec![a, b]
        }
        Functional::Vev { threshold } => vec![vev_consistency(truth, measure, domain, threshold)?],
        Functional::Kg => vec![kg_consistency(truth, measure)?],
        Functional::Ei => {
            let (a, b) = ei_consistency(truth, measure, functional.zero_sd_tol)?;
            vec![a, b]
        }
    })
}

/// Runs the sequential design on a truth sampled from the prior.
pub fn run_sur(
    domain: &Domain,
    kernel: &KernelSpec,
    prior_mean: f64,
    config: &StrategyConfig,
) -> Result<RunTrace> {
    config.validate(domain)?;
    let prior = build_prior(domain, prior_mean, kernel)?;
    let truth = sample_path(&prior, derive_seed(config.seed, STREAM_TRUTH))?;
    run_sur_on_truth(domain, &prior, truth, config)
}

/// Runs the sequential design from a given prior against a given truth.
pub fn run_sur_on_truth(
    domain: &Domain,
    prior: &GaussianMeasure,
    truth: Vec<f64>,
    config: &StrategyConfig,
) -> Result<RunTrace> {
    config.validate(domain)?;
    let n = domain.len();
    if truth.len() != n || prior.len() != n {
        return Err(Error::Parameter(
            "prior, truth and domain sizes differ".into(),
        ));
    }
    let spec = &config.functional;
    let candidates = config.candidates.resolve(n)?;
    let functional_seed = derive_seed(config.seed, STREAM_FUNCTIONAL);
    let noise_seed = derive_seed(config.seed, STREAM_NOISE);
    let select_seed = derive_seed(config.seed, STREAM_SELECT);
    let init_seed = derive_seed(config.seed, STREAM_INIT_NOISE);

    let mut measure = prior.clone();
    let mut initial = Vec::with_capacity(config.n_init);
    for (i, index) in initial_design(n, config.n_init).into_iter().enumerate() {
        let obs = simulate_observation(&truth, domain, index, derive_seed(init_seed, i as u64))?;
        measure.condition_one_in_place(domain.noise_sd()[index], index, obs.value)?;
        initial.push(obs);
    }

    let mut rows = Vec::with_capacity(config.n_steps + 1);
    let mut variance_violations = 0;
    for step in 0..=config.n_steps {
        let tagged = |e: Error| e.at_step(step);
        let metrics = consistency_metrics(spec, &truth, &measure, domain).map_err(tagged)?;
        if step == config.n_steps {
            let h = eval(spec, &measure, domain, functional_seed).map_err(tagged)?;
            rows.push(final_row(step, h, metrics));
            break;
        }
        let evaluation = evaluate_candidates(&measure, domain, spec, &candidates, functional_seed)
            .map_err(tagged)?;
        let n_obs = config.n_init + step;
        let epsilon = config.epsilon.at(n_obs);
        let best = evaluation.best_position();
        let pos = if epsilon > 0.0 {
            // Quasi-SUR: any candidate whose gain is within ε of the best.
            let floor = evaluation.values[best].gain - epsilon;
            let admissible: Vec<usize> = (0..candidates.len())
                .filter(|&p| evaluation.values[p].gain >= floor)
                .collect();
            let mut rng = rng_from_seed(derive_seed(select_seed, step as u64));
            admissible[rng.random_range(0..admissible.len())]
        } else {
            best
        };
        let index = candidates[pos];
        let chosen = evaluation.values[pos];
        let obs = simulate_observation(&truth, domain, index, derive_seed(noise_seed, step as u64))
            .map_err(tagged)?;
        let mut next = measure.clone();
        next.condition_one_in_place(domain.noise_sd()[index], index, obs.value)
            .map_err(tagged)?;
        let increment = measure_increment(&measure, &next);
        variance_violations += (0..n)
            .filter(|&u| next.cov()[(u, u)] - measure.cov()[(u, u)] > VARIANCE_MONOTONICITY_TOL)
            .count();
        rows.push(TraceRow {
            step,
            selected_index: Some(index),
            z: Some(obs.value),
            h: evaluation.h.value,
            h_stderr: evaluation.h.stderr,
            j_min: Some(evaluation.min_j()),
            j_selected: Some(chosen.j),
            epsilon: Some(epsilon),
            gain: Some(chosen.gain),
            metrics,
            increment: Some(increment),
        });
        measure = next;
    }
    Ok(RunTrace {
        functional: *spec,
        seed: config.seed,
        initial_design: initial,
        rows,
        truth,
        final_mean: measure.mean().to_vec(),
        final_variance: measure.variances(),
        variance_violations,
    })
}

fn final_row(step: usize, h: FunctionalValue, metrics: Vec<f64>) -> TraceRow {
    TraceRow {
        step,
        selected_index: None,
        z: None,
        h: h.value,
        h_stderr: h.stderr,
        j_min: None,
        j_selected: None,
        epsilon: None,
        gain: None,
        metrics,
        increment: None,
    }
}
