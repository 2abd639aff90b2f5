//! Configuration-driven experiments: replicated runs, multi-functional
//! comparisons and randomized verification suites, with CSV/JSON outputs.
//!
//! A configuration is a single JSON document (see `docs/config.md` in the
//! repository). Replication seeds are derived from a SHA-256 hash of the
//! validated configuration, so identical configurations give identical bytes.

mod check;
mod output;
mod run;

pub use check::{cmd_check, run_check_suites, CheckConfig, CheckReport, Suite, SuiteResult};
pub use output::{quantile, trace_csv, write_json, Quantiles, TRACE_COLUMNS};
pub use run::{
    cmd_compare, cmd_run, run_replications, summarize, CompareEntry, CompareOutcome,
    CompareSummary, Manifest, MetricSummary, RunOutcome, Summary, COMPARE_COLUMNS, QUASI_SUR_TOL,
};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::functionals::{Functional, FunctionalSpec};
use crate::grid::{Domain, KernelSpec};
use crate::strategy::{Candidates, Epsilon, StrategyConfig};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical error: {0}")]
    Numerical(#[source] crate::Error),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ExperimentError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) => 2,
            ExperimentError::Numerical(_) => 3,
            ExperimentError::Io { .. } => 4,
        }
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        ExperimentError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

impl From<crate::Error> for ExperimentError {
    fn from(e: crate::Error) -> Self {
        match e.root() {
            crate::Error::Parameter(msg) => ExperimentError::Config(msg.clone()),
            _ => ExperimentError::Numerical(e),
        }
    }
}

pub type ExperimentResult<T> = std::result::Result<T, ExperimentError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum WeightsMode {
    Uniform,
    Custom { values: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum NoiseMode {
    Zero,
    Constant { value: f64 },
    Custom { values: Vec<f64> },
}

fn default_weights() -> WeightsMode {
    WeightsMode::Uniform
}

fn default_noise() -> NoiseMode {
    NoiseMode::Zero
}

/// Regular grid over a box in one or two dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub dimension: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Points per axis.
    pub resolution: usize,
    #[serde(default = "default_weights")]
    pub weights: WeightsMode,
    #[serde(default = "default_noise")]
    pub noise: NoiseMode,
}

impl DomainConfig {
    pub fn build(&self) -> ExperimentResult<Domain> {
        let cfg = |m: String| ExperimentError::Config(m);
        if !(1..=2).contains(&self.dimension) {
            return Err(cfg(format!(
                "dimension must be 1 or 2, got {}",
                self.dimension
            )));
        }
        if self.lower.len() != self.dimension || self.upper.len() != self.dimension {
            return Err(cfg("lower/upper must have one entry per dimension".into()));
        }
        if self
            .lower
            .iter()
            .zip(&self.upper)
            .any(|(l, u)| !(l.is_finite() && u.is_finite() && l < u))
        {
            return Err(cfg(
                "each lower bound must be finite and below its upper bound".into(),
            ));
        }
        if self.resolution < 2 {
            return Err(cfg(format!(
                "resolution must be at least 2, got {}",
                self.resolution
            )));
        }
        let domain = if self.dimension == 1 {
            Domain::grid_1d(self.lower[0], self.upper[0], self.resolution)?
        } else {
            Domain::grid_2d(
                [self.lower[0], self.lower[1]],
                [self.upper[0], self.upper[1]],
                self.resolution,
            )?
        };
        let n = domain.len();
        let domain = match &self.weights {
            WeightsMode::Uniform => domain,
            WeightsMode::Custom { values } => {
                if values.len() != n {
                    return Err(cfg(format!(
                        "custom weights need {n} values, got {}",
                        values.len()
                    )));
                }
                domain.with_weights(values.clone())?
            }
        };
        let noise = match &self.noise {
            NoiseMode::Zero => vec![0.0; n],
            NoiseMode::Constant { value } => vec![*value; n],
            NoiseMode::Custom { values } => {
                if values.len() != n {
                    return Err(cfg(format!(
                        "custom noise needs {n} values, got {}",
                        values.len()
                    )));
                }
                values.clone()
            }
        };
        Ok(domain.with_noise(noise)?)
    }

    pub fn is_noiseless(&self) -> bool {
        match &self.noise {
            NoiseMode::Zero => true,
            NoiseMode::Constant { value } => *value == 0.0,
            NoiseMode::Custom { values } => values.iter().all(|v| *v == 0.0),
        }
    }
}

fn default_n_init() -> usize {
    3
}

/// Strategy settings shared by every replication (the seed is derived).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategySection {
    #[serde(default = "default_n_init")]
    pub n_init: usize,
    pub n_steps: usize,
    #[serde(default)]
    pub epsilon: Epsilon,
    #[serde(default)]
    pub candidates: Candidates,
}

fn default_replications() -> usize {
    1
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("sur-output")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub domain: DomainConfig,
    pub kernel: KernelSpec,
    #[serde(default)]
    pub prior_mean: f64,
    /// Functional for `run`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub functional: Option<FunctionalSpec>,
    /// Functionals for `compare`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub functionals: Vec<FunctionalSpec>,
    pub strategy: StrategySection,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default)]
    pub seed: u64,
    /// Not part of the configuration hash.
    #[serde(default = "default_output_dir", skip_serializing)]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub check: CheckConfig,
}

/// Command-line overrides applied after parsing.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub output_dir: Option<PathBuf>,
    pub replications: Option<usize>,
    pub seed: Option<u64>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> ExperimentResult<Self> {
        serde_json::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    pub fn load(path: &Path, overrides: &Overrides) -> ExperimentResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::io(path, e))?;
        let mut config = Self::from_json(&text)?;
        if let Some(dir) = &overrides.output_dir {
            config.output_dir = dir.clone();
        }
        if let Some(r) = overrides.replications {
            config.replications = r;
        }
        if let Some(s) = overrides.seed {
            config.seed = s;
        }
        Ok(config)
    }

    /// Checks everything that does not depend on which command runs.
    pub fn validate_common(&self) -> ExperimentResult<Domain> {
        let domain = self.domain.build()?;
        self.kernel.validate(domain.dim())?;
        if !self.prior_mean.is_finite() {
            return Err(ExperimentError::Config("prior_mean must be finite".into()));
        }
        if self.replications == 0 {
            return Err(ExperimentError::Config(
                "replications must be at least 1".into(),
            ));
        }
        self.check.validate()?;
        Ok(domain)
    }

    fn validate_functional(&self, spec: &FunctionalSpec, domain: &Domain) -> ExperimentResult<()> {
        if matches!(spec.functional, Functional::Ei) && !self.domain.is_noiseless() {
            return Err(ExperimentError::Config(
                "expected improvement requires noiseless observations: noise mode must be zero"
                    .into(),
            ));
        }
        self.strategy_for(spec, 0).validate(domain)?;
        Ok(())
    }

    /// Validation for `run`: needs `functional`.
    pub fn validate_run(&self) -> ExperimentResult<(Domain, FunctionalSpec)> {
        let domain = self.validate_common()?;
        let spec = self
            .functional
            .ok_or_else(|| ExperimentError::Config("`functional` is required for run".into()))?;
        self.validate_functional(&spec, &domain)?;
        Ok((domain, spec))
    }

    /// Validation for `compare`: needs a nonempty `functionals` list.
    pub fn validate_compare(&self) -> ExperimentResult<(Domain, Vec<FunctionalSpec>)> {
        let domain = self.validate_common()?;
        if self.functionals.is_empty() {
            return Err(ExperimentError::Config(
                "`functionals` must list at least one functional for compare".into(),
            ));
        }
        for spec in &self.functionals {
            self.validate_functional(spec, &domain)?;
        }
        Ok((domain, self.functionals.clone()))
    }

    pub fn strategy_for(&self, spec: &FunctionalSpec, seed: u64) -> StrategyConfig {
        StrategyConfig {
            functional: *spec,
            n_init: self.strategy.n_init,
            n_steps: self.strategy.n_steps,
            epsilon: self.strategy.epsilon,
            seed,
            candidates: self.strategy.candidates.clone(),
        }
    }

    /// SHA-256 of the canonical JSON form (output directory excluded).
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    /// Seed of replication `r`: hash(config, r).
    pub fn replication_seed(&self, r: usize) -> u64 {
        let mut hasher = Sha256::new();
        hasher.update(self.hash().as_bytes());
        hasher.update((r as u64).to_le_bytes());
        let digest = hasher.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const MINIMAL: &str = r#"{
        "domain": {"dimension": 1, "lower": [0.0], "upper": [1.0], "resolution": 11},
        "kernel": {"family": "matern52", "variance": 1.0, "lengthscale": [0.2]},
        "functional": {"kind": "ibv", "threshold": 0.5},
        "strategy": {"n_steps": 3}
    }"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let c = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(c.replications, 1);
        assert_eq!(c.strategy.n_init, 3);
        let (domain, _) = c.validate_run().unwrap();
        assert_eq!(domain.len(), 11);
    }

    #[test]
    fn ei_with_noise_is_a_config_error() {
        let text = MINIMAL
            .replace(r#""kind": "ibv", "threshold": 0.5"#, r#""kind": "ei""#)
            .replace(
                r#""resolution": 11"#,
                r#""resolution": 11, "noise": {"mode": "constant", "value": 0.1}"#,
            );
        let c = ExperimentConfig::from_json(&text).unwrap();
        let err = c.validate_run().unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("noiseless"));
    }

    #[test]
    fn invalid_fields_are_rejected() {
        for (from, to) in [
            (r#""resolution": 11"#, r#""resolution": 1"#),
            (
                r#""n_steps": 3"#,
                r#""n_steps": 3, "epsilon": {"type": "constant", "value": 0.2}"#,
            ),
            (r#""variance": 1.0"#, r#""variance": -1.0"#),
            (r#""n_steps": 3"#, r#""n_steps": 3, "bogus": 1"#),
        ] {
            let text = MINIMAL.replace(from, to);
            let result =
                ExperimentConfig::from_json(&text).and_then(|c| c.validate_run().map(|_| ()));
            assert!(matches!(result, Err(ExperimentError::Config(_))), "{to}");
        }
        let no_functional = ExperimentConfig::from_json(
            &MINIMAL.replace(r#""functional": {"kind": "ibv", "threshold": 0.5},"#, ""),
        )
        .unwrap();
        assert!(no_functional.validate_run().is_err());
    }

    #[test]
    fn hash_ignores_output_dir_but_not_seed() {
        let a = ExperimentConfig::from_json(MINIMAL).unwrap();
        let mut b = a.clone();
        b.output_dir = PathBuf::from("/elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.seed = 9;
        assert_ne!(a.hash(), b.hash());
        assert_ne!(a.replication_seed(0), a.replication_seed(1));
    }
}
