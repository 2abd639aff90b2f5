//! Uncertainty functionals H(ν) evaluated on a Gaussian measure.
//!
//! IBV and VEV are computed in closed form from one- and two-dimensional
//! normal probabilities. KG and EI need E[max ξ], which is estimated by
//! Monte Carlo over sample paths; the same seed gives the same normal draws,
//! so evaluations sharing a seed use common random numbers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Domain, GaussianMeasure, PathSampler};
use crate::rng;
use crate::special::{excursion_prob, std_normal_sf};

pub const DEFAULT_MC_SAMPLES: usize = 2000;
pub const DEFAULT_ZERO_SD_TOL: f64 = 1e-9;

/// Pairs whose Cauchy–Schwarz bound √(q₁q₂) is below this are skipped in VEV.
const VEV_PAIR_SKIP: f64 = 1e-12;

/// Which uncertainty functional, with the parameters it needs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Functional {
    /// Integrated Bernoulli variance ∫ p(1 - p) dμ of the excursion above `threshold`.
    Ibv { threshold: f64 },
    /// Posterior variance of the excursion volume μ({ξ ≥ threshold}).
    Vev { threshold: f64 },
    /// Knowledge gradient: E[max ξ] - max E[ξ].
    Kg,
    /// Expected improvement: E[max ξ] - max of the mean over known points.
    Ei,
}

impl Functional {
    pub fn label(&self) -> &'static str {
        match self {
            Functional::Ibv { .. } => "ibv",
            Functional::Vev { .. } => "vev",
            Functional::Kg => "kg",
            Functional::Ei => "ei",
        }
    }

    pub fn threshold(&self) -> Option<f64> {
        match *self {
            Functional::Ibv { threshold } | Functional::Vev { threshold } => Some(threshold),
            Functional::Kg | Functional::Ei => None,
        }
    }

    pub fn uses_monte_carlo(&self) -> bool {
        matches!(self, Functional::Kg | Functional::Ei)
    }
}

fn default_mc_samples() -> usize {
    DEFAULT_MC_SAMPLES
}

fn default_zero_sd_tol() -> f64 {
    DEFAULT_ZERO_SD_TOL
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FunctionalSpec {
    #[serde(flatten)]
    pub functional: Functional,
    /// Monte Carlo sample count for E[max ξ] (KG and EI).
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
    /// Relative variance level below which EI treats a point as known.
    #[serde(default = "default_zero_sd_tol")]
    pub zero_sd_tol: f64,
}

impl FunctionalSpec {
    pub fn new(functional: Functional) -> Self {
        Self {
            functional,
            mc_samples: DEFAULT_MC_SAMPLES,
            zero_sd_tol: DEFAULT_ZERO_SD_TOL,
        }
    }

    pub fn ibv(threshold: f64) -> Self {
        Self::new(Functional::Ibv { threshold })
    }

    pub fn vev(threshold: f64) -> Self {
        Self::new(Functional::Vev { threshold })
    }

    pub fn kg() -> Self {
        Self::new(Functional::Kg)
    }

    pub fn ei() -> Self {
        Self::new(Functional::Ei)
    }

    pub fn with_mc_samples(mut self, mc_samples: usize) -> Self {
        self.mc_samples = mc_samples;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.functional.threshold() {
            if !t.is_finite() {
                return Err(Error::Parameter("threshold must be finite".into()));
            }
        }
        if self.mc_samples == 0 {
            return Err(Error::Parameter("mc_samples must be at least 1".into()));
        }
        if !(self.zero_sd_tol.is_finite() && self.zero_sd_tol >= 0.0) {
            return Err(Error::Parameter(
                "zero_sd_tol must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// H(ν) with its Monte Carlo standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FunctionalValue {
    /// Clamped at zero.
    pub value: f64,
    pub stderr: f64,
    /// Unclamped estimate; differs from `value` only for MC kinds.
    pub raw: f64,
    /// False when the standard error could not be estimated (a single MC draw).
    pub stderr_available: bool,
}

impl FunctionalValue {
    pub fn exact(value: f64) -> Self {
        let value = value.max(0.0);
        Self {
            value,
            stderr: 0.0,
            raw: value,
            stderr_available: true,
        }
    }

    pub fn zero() -> Self {
        Self::exact(0.0)
    }
}

fn check_bound(measure: &GaussianMeasure, domain: &Domain) -> Result<()> {
    if measure.len() != domain.len() {
        return Err(Error::Parameter(format!(
            "measure has {} grid values but the domain has {} points",
            measure.len(),
            domain.len()
        )));
    }
    Ok(())
}

/// Excursion probabilities p(u) = P(ξ(u) ≥ T) under the measure.
pub fn excursion_probs(measure: &GaussianMeasure, threshold: f64) -> Vec<f64> {
    (0..measure.len())
        .map(|u| excursion_prob(measure.mean()[u], measure.sd(u), threshold))
        .collect()
}

pub fn eval_ibv(
    measure: &GaussianMeasure,
    domain: &Domain,
    threshold: f64,
) -> Result<FunctionalValue> {
    check_bound(measure, domain)?;
    let value = excursion_probs(measure, threshold)
        .iter()
        .zip(domain.weights())
        .map(|(p, w)| w * p * (1.0 - p))
        .sum();
    Ok(FunctionalValue::exact(value))
}

/// Variance of a weighted sum of excursion indicators, from marginal means,
/// standard deviations and a covariance accessor.
pub(crate) fn indicator_sum_variance(
    means: &[f64],
    sds: &[f64],
    cov: impl Fn(usize, usize) -> f64,
    weights: &[f64],
    threshold: f64,
) -> Result<f64> {
    let n = means.len();
    let mut h = vec![0.0; n];
    let mut q = vec![0.0; n];
    let mut active = Vec::with_capacity(n);
    let mut total = 0.0;
    for u in 0..n {
        let p = excursion_prob(means[u], sds[u], threshold);
        q[u] = p * (1.0 - p);
        total += weights[u] * weights[u] * q[u];
        if sds[u] > 0.0 && weights[u] > 0.0 && q[u] > 0.0 {
            h[u] = (threshold - means[u]) / sds[u];
            active.push(u);
        }
    }
    for (a, &u) in active.iter().enumerate() {
        for &v in &active[a + 1..] {
            if (q[u] * q[v]).sqrt() < VEV_PAIR_SKIP {
                continue;
            }
            let c = repaired_cov(cov(u, v), sds[u], sds[v])?;
            let joint = crate::special::bvn_orthant(h[u], h[v], c / (sds[u] * sds[v]));
            let pu = std_normal_sf(h[u]);
            let pv = std_normal_sf(h[v]);
            total += 2.0 * weights[u] * weights[v] * (joint - pu * pv);
        }
    }
    Ok(total.max(0.0))
}

/// Pulls a cross-covariance back inside [-s1·s2, s1·s2] when the excess is
/// round-off.
pub(crate) fn repaired_cov(c: f64, s1: f64, s2: f64) -> Result<f64> {
    let bound = s1 * s2;
    if c.abs() <= bound {
        return Ok(c);
    }
    if c.abs() <= bound * (1.0 + crate::special::PSD_TOL) + f64::MIN_POSITIVE {
        return Ok(c.clamp(-bound, bound));
    }
    Err(Error::Numerical(format!(
        "2x2 covariance block is not positive semidefinite: |{c:e}| > {bound:e}"
    )))
}

pub fn eval_vev(
    measure: &GaussianMeasure,
    domain: &Domain,
    threshold: f64,
) -> Result<FunctionalValue> {
    check_bound(measure, domain)?;
    let sds: Vec<f64> = (0..measure.len()).map(|u| measure.sd(u)).collect();
    let cov = measure.cov();
    let value = indicator_sum_variance(
        measure.mean(),
        &sds,
        |u, v| cov[(u, v)],
        domain.weights(),
        threshold,
    )?;
    Ok(FunctionalValue::exact(value))
}

/// Per-draw maxima of `mc_samples` sample paths; draw s uses the s-th block
/// of normals from `seed`.
pub fn path_max_samples(
    measure: &GaussianMeasure,
    mc_samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let sampler = PathSampler::new(measure)?;
    let n = measure.len();
    if sampler.is_degenerate() {
        let top = measure
            .mean()
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        return Ok(vec![top; mc_samples]);
    }
    let mut rng = rng::rng_from_seed(seed);
    let mut z = vec![0.0; n];
    let mut path = vec![0.0; n];
    let mut maxima = Vec::with_capacity(mc_samples);
    for _ in 0..mc_samples {
        for zi in z.iter_mut() {
            *zi = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
        }
        sampler.sample_into(&z, &mut path);
        maxima.push(path.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    }
    Ok(maxima)
}

/// Centered sample paths L·z (row-major, `mc_samples` × N) drawn with the
/// same normals as [`path_max_samples`]; None for a degenerate measure.
pub(crate) fn path_deviations(
    measure: &GaussianMeasure,
    mc_samples: usize,
    seed: u64,
) -> Result<Option<Vec<f64>>> {
    let sampler = PathSampler::new(measure)?;
    if sampler.is_degenerate() {
        return Ok(None);
    }
    let n = measure.len();
    let mut rng = rng::rng_from_seed(seed);
    let mut z = vec![0.0; n];
    let mut out = vec![0.0; n * mc_samples];
    for path in out.chunks_mut(n) {
        for zi in z.iter_mut() {
            *zi = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
        }
        sampler.sample_into(&z, path);
        for (p, m) in path.iter_mut().zip(measure.mean()) {
            *p -= m;
        }
    }
    Ok(Some(out))
}

pub(crate) fn mean_and_stderr(xs: &[f64]) -> (f64, f64, bool) {
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0, false);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt(), true)
}

fn expected_max_minus(
    measure: &GaussianMeasure,
    baseline: f64,
    mc_samples: usize,
    seed: u64,
) -> Result<FunctionalValue> {
    if mc_samples == 0 {
        return Err(Error::Parameter("mc_samples must be at least 1".into()));
    }
    let maxima = path_max_samples(measure, mc_samples, seed)?;
    let (mean, stderr, available) = mean_and_stderr(&maxima);
    let raw = mean - baseline;
    Ok(FunctionalValue {
        value: raw.max(0.0),
        stderr,
        raw,
        stderr_available: available,
    })
}

pub fn max_mean(measure: &GaussianMeasure) -> f64 {
    measure
        .mean()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn eval_kg(measure: &GaussianMeasure, mc_samples: usize, seed: u64) -> Result<FunctionalValue> {
    if mc_samples == 0 {
        return Err(Error::Parameter("mc_samples must be at least 1".into()));
    }
    // With one grid value, max ξ = ξ and E[max ξ] is the mean exactly.
    if measure.is_degenerate() || measure.len() == 1 {
        return Ok(FunctionalValue::zero());
    }
    expected_max_minus(measure, max_mean(measure), mc_samples, seed)
}

/// Variance level at or below which a point counts as known for EI.
pub fn zero_variance_level(measure: &GaussianMeasure, zero_sd_tol: f64) -> f64 {
    zero_sd_tol * measure.scale().max(1.0)
}

/// Grid indices whose posterior variance is numerically zero.
pub fn zero_variance_set(measure: &GaussianMeasure, zero_sd_tol: f64) -> Vec<usize> {
    let level = zero_variance_level(measure, zero_sd_tol);
    (0..measure.len())
        .filter(|&u| measure.cov()[(u, u)] <= level)
        .collect()
}

/// M = max of the mean over the numerically-known points.
pub fn best_known_value(measure: &GaussianMeasure, zero_sd_tol: f64) -> Result<f64> {
    let known = zero_variance_set(measure, zero_sd_tol);
    if known.is_empty() {
        return Err(Error::State(
            "expected improvement is undefined before the first noiseless observation".into(),
        ));
    }
    Ok(known
        .iter()
        .map(|&u| measure.mean()[u])
        .fold(f64::NEG_INFINITY, f64::max))
}

pub(crate) fn require_noiseless(domain: &Domain) -> Result<()> {
    if domain.is_noiseless() {
        Ok(())
    } else {
        Err(Error::Parameter(
            "expected improvement requires noiseless observations (noise_sd = 0 everywhere)".into(),
        ))
    }
}

pub fn eval_ei(
    measure: &GaussianMeasure,
    domain: &Domain,
    mc_samples: usize,
    zero_sd_tol: f64,
    seed: u64,
) -> Result<FunctionalValue> {
    check_bound(measure, domain)?;
    require_noiseless(domain)?;
    if mc_samples == 0 {
        return Err(Error::Parameter("mc_samples must be at least 1".into()));
    }
    let best = best_known_value(measure, zero_sd_tol)?;
    if measure.is_degenerate() {
        return Ok(FunctionalValue::exact(max_mean(measure) - best));
    }
    expected_max_minus(measure, best, mc_samples, seed)
}

/// H(ν) for the functional described by `spec`; deterministic given `seed`.
pub fn eval(
    spec: &FunctionalSpec,
    measure: &GaussianMeasure,
    domain: &Domain,
    seed: u64,
) -> Result<FunctionalValue> {
    match spec.functional {
        Functional::Ibv { threshold } => eval_ibv(measure, domain, threshold),
        Functional::Vev { threshold } => eval_vev(measure, domain, threshold),
        Functional::Kg => {
            check_bound(measure, domain)?;
            eval_kg(measure, spec.mc_samples, seed)
        }
        Functional::Ei => eval_ei(measure, domain, spec.mc_samples, spec.zero_sd_tol, seed),
    }
}
