//! Empirical checks: the one-step supermartingale inequality, consistency
//! metrics against a known truth, and convergence of posterior sequences.

use serde::{Deserialize, Serialize};

use crate::criteria::{j_outcome_exact, j_quadrature, j_quadrature_generic, CriterionValue};
use crate::error::{Error, Result};
use crate::functionals::{best_known_value, excursion_probs, FunctionalSpec, FunctionalValue};
use crate::grid::{Domain, GaussianMeasure};
use crate::rng::derive_seed;
use crate::special::QuadratureRule;

/// Largest tolerated increase of a posterior variance between steps.
pub const VARIANCE_MONOTONICITY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupermartingaleReport {
    pub candidates: Vec<usize>,
    pub values: Vec<CriterionValue>,
    /// min over candidates of gain + tol + 3·stderr; negative means a violation.
    pub worst_margin: f64,
    pub pass: bool,
}

fn report(candidates: &[usize], values: Vec<CriterionValue>, tol: f64) -> SupermartingaleReport {
    let worst_margin = values
        .iter()
        .map(|v| v.gain + tol + 3.0 * v.stderr)
        .fold(f64::INFINITY, f64::min);
    SupermartingaleReport {
        candidates: candidates.to_vec(),
        values,
        worst_margin,
        pass: worst_margin >= 0.0,
    }
}

/// Checks J_x(ν) ≤ H(ν) at every candidate using quadrature lookahead.
pub fn check_supermartingale(
    measure: &GaussianMeasure,
    domain: &Domain,
    spec: &FunctionalSpec,
    candidates: &[usize],
    rule: &QuadratureRule,
    seed: u64,
    tol: f64,
) -> Result<SupermartingaleReport> {
    let values = candidates
        .iter()
        .map(|&x| j_quadrature(measure, domain, x, spec, rule, derive_seed(seed, x as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(report(candidates, values, tol))
}

/// The check with the outcome integral done exactly ([`j_outcome_exact`]),
/// free of the quadrature error that kinked KG/EI integrands carry.
pub fn check_supermartingale_exact(
    measure: &GaussianMeasure,
    domain: &Domain,
    spec: &FunctionalSpec,
    candidates: &[usize],
    seed: u64,
    tol: f64,
) -> Result<SupermartingaleReport> {
    let values = candidates
        .iter()
        .map(|&x| j_outcome_exact(measure, domain, x, spec, derive_seed(seed, x as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(report(candidates, values, tol))
}

/// Same check for an arbitrary functional (used to self-test the checker).
pub fn check_supermartingale_with(
    measure: &GaussianMeasure,
    domain: &Domain,
    candidates: &[usize],
    rule: &QuadratureRule,
    tol: f64,
    functional: &(dyn Fn(&GaussianMeasure) -> Result<FunctionalValue> + Sync),
) -> Result<SupermartingaleReport> {
    let values = candidates
        .iter()
        .map(|&x| j_quadrature_generic(measure, domain, x, rule, functional))
        .collect::<Result<Vec<_>>>()?;
    Ok(report(candidates, values, tol))
}

fn check_truth(truth: &[f64], measure: &GaussianMeasure) -> Result<()> {
    if truth.len() != measure.len() {
        return Err(Error::Parameter(format!(
            "truth has {} values but the measure has {}",
            truth.len(),
            measure.len()
        )));
    }
    Ok(())
}

/// (∫(1{ξ ≥ T} - p_n)² dμ, ∫(1{ξ ≥ T} - 1{p_n ≥ ½})² dμ).
pub fn ibv_consistency(
    truth: &[f64],
    measure: &GaussianMeasure,
    domain: &Domain,
    threshold: f64,
) -> Result<(f64, f64)> {
    check_truth(truth, measure)?;
    let probs = excursion_probs(measure, threshold);
    let mut l2_prob = 0.0;
    let mut l2_plugin = 0.0;
    for ((&t, &p), &w) in truth.iter().zip(&probs).zip(domain.weights()) {
        let indicator = if t >= threshold { 1.0 } else { 0.0 };
        let plugin = if p >= 0.5 { 1.0 } else { 0.0 };
        l2_prob += w * (indicator - p).powi(2);
        l2_plugin += w * (indicator - plugin).powi(2);
    }
    Ok((l2_prob, l2_plugin))
}

/// |E_n[α(ξ)] - α(truth)| for the excursion volume α.
pub fn vev_consistency(
    truth: &[f64],
    measure: &GaussianMeasure,
    domain: &Domain,
    threshold: f64,
) -> Result<f64> {
    check_truth(truth, measure)?;
    let probs = excursion_probs(measure, threshold);
    let expected: f64 = probs.iter().zip(domain.weights()).map(|(p, w)| p * w).sum();
    let actual: f64 = truth
        .iter()
        .zip(domain.weights())
        .filter(|(t, _)| **t >= threshold)
        .map(|(_, w)| w)
        .sum();
    Ok((expected - actual).abs())
}

fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn max_of(values: &[f64]) -> f64 {
    values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// max ξ - ξ(x*_n), where x*_n maximizes the posterior mean.
pub fn kg_consistency(truth: &[f64], measure: &GaussianMeasure) -> Result<f64> {
    check_truth(truth, measure)?;
    Ok(max_of(truth) - truth[argmax_lowest(measure.mean())])
}

/// (max ξ - M_n, max m_n - M_n) with M_n the best value at known points.
pub fn ei_consistency(
    truth: &[f64],
    measure: &GaussianMeasure,
    zero_sd_tol: f64,
) -> Result<(f64, f64)> {
    check_truth(truth, measure)?;
    let best = best_known_value(measure, zero_sd_tol)?;
    Ok((max_of(truth) - best, max_of(measure.mean()) - best))
}

/// Increments between consecutive posteriors of one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasureIncrement {
    pub mean_sup: f64,
    pub cov_sup: f64,
    /// max_u (var_{n+1}(u) - var_n(u)); positive values are increases.
    pub max_variance_increase: f64,
}

pub fn measure_increment(before: &GaussianMeasure, after: &GaussianMeasure) -> MeasureIncrement {
    let mean_sup = before
        .mean()
        .iter()
        .zip(after.mean())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let cov_sup = (before.cov() - after.cov()).amax();
    let max_variance_increase = (0..before.len())
        .map(|u| after.cov()[(u, u)] - before.cov()[(u, u)])
        .fold(f64::NEG_INFINITY, f64::max);
    MeasureIncrement {
        mean_sup,
        cov_sup,
        max_variance_increase,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub increments: Vec<MeasureIncrement>,
    /// Number of (step, index) pairs whose variance grew by more than the tolerance.
    pub variance_violations: usize,
    pub max_variance_increase: f64,
}

pub fn convergence_of_measures(measures: &[GaussianMeasure]) -> Result<ConvergenceReport> {
    if measures.len() < 2 {
        return Err(Error::Parameter("need at least two measures".into()));
    }
    let mut increments = Vec::with_capacity(measures.len() - 1);
    let mut variance_violations = 0;
    for pair in measures.windows(2) {
        increments.push(measure_increment(&pair[0], &pair[1]));
        variance_violations += (0..pair[0].len())
            .filter(|&u| pair[1].cov()[(u, u)] - pair[0].cov()[(u, u)] > VARIANCE_MONOTONICITY_TOL)
            .count();
    }
    let max_variance_increase = increments
        .iter()
        .map(|i| i.max_variance_increase)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(ConvergenceReport {
        increments,
        variance_violations,
        max_variance_increase,
    })
}

/// Averaged supermartingale check across replications: for each step,
/// mean(H_{n+1} - H_n) ≤ 3·stderr of the paired differences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AveragedSupermartingale {
    pub mean_h: Vec<f64>,
    /// mean(H_{n+1} - H_n) - 3·stderr for each n; must be ≤ 0.
    pub excess: Vec<f64>,
    pub pass: bool,
}

pub fn averaged_supermartingale(h_traces: &[Vec<f64>]) -> Result<AveragedSupermartingale> {
    let reps = h_traces.len();
    if reps == 0 {
        return Err(Error::Parameter("no replications".into()));
    }
    let len = h_traces[0].len();
    if h_traces.iter().any(|t| t.len() != len) {
        return Err(Error::Parameter(
            "replications have different lengths".into(),
        ));
    }
    let mean_h: Vec<f64> = (0..len)
        .map(|n| h_traces.iter().map(|t| t[n]).sum::<f64>() / reps as f64)
        .collect();
    let excess: Vec<f64> = (0..len.saturating_sub(1))
        .map(|n| {
            let diffs: Vec<f64> = h_traces.iter().map(|t| t[n + 1] - t[n]).collect();
            let (mean, stderr, _) = crate::functionals::mean_and_stderr(&diffs);
            mean - 3.0 * stderr
        })
        .collect();
    let pass = excess.iter().all(|&e| e <= 0.0);
    Ok(AveragedSupermartingale {
        mean_h,
        excess,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functionals::eval;
    use crate::grid::{build_prior, condition, KernelFamily, KernelSpec, Observation};
    use crate::special::gauss_hermite_rule;
    use nalgebra::DMatrix;

    fn setup() -> (Domain, GaussianMeasure) {
        let domain = Domain::grid_1d(0.0, 1.0, 8).unwrap();
        let kernel = KernelSpec::new(KernelFamily::Matern52, 1.0, vec![0.3]);
        let prior = build_prior(&domain, 0.0, &kernel).unwrap();
        let post = condition(
            &prior,
            &domain,
            &[
                Observation {
                    index: 2,
                    value: 0.4,
                },
                Observation {
                    index: 6,
                    value: -0.9,
                },
            ],
        )
        .unwrap();
        (domain, post)
    }

    #[test]
    fn degenerate_measure_passes() {
        let domain = Domain::grid_1d(0.0, 1.0, 3).unwrap();
        let m = GaussianMeasure::new(vec![0.0; 3], DMatrix::zeros(3, 3)).unwrap();
        let rule = gauss_hermite_rule(9).unwrap();
        let r = check_supermartingale(
            &m,
            &domain,
            &FunctionalSpec::ibv(0.0),
            &[0, 1, 2],
            &rule,
            0,
            1e-6,
        )
        .unwrap();
        assert!(r.pass);
        assert!(r.values.iter().all(|v| v.gain == 0.0));
    }

    #[test]
    fn conditioned_posterior_passes_and_negated_functional_fails() {
        let (domain, post) = setup();
        let rule = gauss_hermite_rule(25).unwrap();
        let spec = FunctionalSpec::ibv(0.0);
        let all: Vec<usize> = (0..8).collect();
        assert!(
            check_supermartingale(&post, &domain, &spec, &all, &rule, 3, 1e-6)
                .unwrap()
                .pass
        );
        let negated = |m: &GaussianMeasure| {
            let v = eval(&spec, m, &domain, 0)?;
            Ok(FunctionalValue {
                value: -v.value,
                raw: -v.raw,
                ..v
            })
        };
        let bad = check_supermartingale_with(&post, &domain, &all, &rule, 1e-6, &negated).unwrap();
        assert!(!bad.pass);
    }

    #[test]
    fn ibv_consistency_examples() {
        let domain = Domain::grid_1d(0.0, 1.0, 4).unwrap();
        let truth = vec![0.3, -0.2, 1.0, 0.0];
        let exact = GaussianMeasure::new(truth.clone(), DMatrix::zeros(4, 4)).unwrap();
        assert_eq!(
            ibv_consistency(&truth, &exact, &domain, 0.1).unwrap(),
            (0.0, 0.0)
        );
        let half = GaussianMeasure::new(vec![0.1; 4], DMatrix::identity(4, 4)).unwrap();
        let (l2, _) = ibv_consistency(&truth, &half, &domain, 0.1).unwrap();
        assert!((l2 - 0.25).abs() < 1e-15);
    }

    #[test]
    fn vev_consistency_examples() {
        let domain = Domain::grid_1d(0.0, 1.0, 4).unwrap();
        let truth = vec![0.3, 0.5, 1.0, 2.0];
        let exact = GaussianMeasure::new(truth.clone(), DMatrix::zeros(4, 4)).unwrap();
        assert_eq!(vev_consistency(&truth, &exact, &domain, 0.1).unwrap(), 0.0);
        let sym = GaussianMeasure::new(vec![0.1; 4], DMatrix::identity(4, 4)).unwrap();
        assert!((vev_consistency(&truth, &sym, &domain, 0.1).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kg_and_ei_consistency_examples() {
        let truth = vec![0.3, 1.5, -0.2];
        let exact = GaussianMeasure::new(truth.clone(), DMatrix::zeros(3, 3)).unwrap();
        assert_eq!(kg_consistency(&truth, &exact).unwrap(), 0.0);
        assert_eq!(ei_consistency(&truth, &exact, 1e-9).unwrap(), (0.0, 0.0));
        let single = GaussianMeasure::new(vec![0.0], DMatrix::from_element(1, 1, 1.0)).unwrap();
        assert_eq!(kg_consistency(&[4.0], &single).unwrap(), 0.0);
        // Known only at the true argmax.
        let cov = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 0.0, 1.0]));
        let m = GaussianMeasure::new(vec![0.0, 1.5, 0.4], cov).unwrap();
        assert_eq!(ei_consistency(&truth, &m, 1e-9).unwrap().0, 0.0);
    }

    #[test]
    fn convergence_checker() {
        let (_, post) = setup();
        let constant =
            convergence_of_measures(&[post.clone(), post.clone(), post.clone()]).unwrap();
        assert_eq!(constant.variance_violations, 0);
        assert!(constant
            .increments
            .iter()
            .all(|i| i.mean_sup == 0.0 && i.cov_sup == 0.0));
        let mut inflated = post.cov().clone();
        inflated[(3, 3)] += 0.1;
        let worse = GaussianMeasure::new(post.mean().to_vec(), inflated).unwrap();
        let r = convergence_of_measures(&[post, worse]).unwrap();
        assert_eq!(r.variance_violations, 1);
        assert!((r.max_variance_increase - 0.1).abs() < 1e-12);
    }

    #[test]
    fn averaged_check_flags_increases() {
        let ok = averaged_supermartingale(&[vec![1.0, 0.5, 0.2], vec![0.8, 0.6, 0.1]]).unwrap();
        assert!(ok.pass);
        let bad =
            averaged_supermartingale(&[vec![0.1, 0.5], vec![0.1, 0.6], vec![0.1, 0.55]]).unwrap();
        assert!(!bad.pass);
    }
}
