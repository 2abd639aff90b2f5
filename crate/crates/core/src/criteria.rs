//! One-step lookahead criteria J_n(x) = E_n[H(P_{n+1})] and the expected
//! gains G_x = H - J_x.
//!
//! The generic route is a quadrature sum over standardized outcomes v: the
//! lookahead measure conditions on the synthetic value m(x) + v·s(x). All
//! four functionals also have exact gains (orthant probabilities for IBV
//! and VEV, the upper envelope for KG, γ for EI), which the selection loop
//! uses; Gauss–Hermite nodes are too coarse for the narrow outcome
//! features that small noise produces.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functionals::{
    self, best_known_value, eval, max_mean, mean_and_stderr, path_deviations, require_noiseless,
    zero_variance_level, zero_variance_set, Functional, FunctionalSpec, FunctionalValue,
};
use crate::grid::{predictive_sd, Domain, GaussianMeasure, NEG_VARIANCE_TOL, PINV_REL_TOL};
use crate::special::{bvn_orthant, excursion_prob, gamma_ei, positive_part_mean, QuadratureRule};

/// Slopes closer than this (relative to the largest slope) are merged in the
/// KG envelope.
const SLOPE_MERGE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriterionValue {
    /// Expected residual uncertainty J_x after observing at x.
    pub j: f64,
    /// Expected gain G_x = H - J_x.
    pub gain: f64,
    pub stderr: f64,
}

/// ν conditioned on a synthetic observation m(x) + v·s(x) at `index`.
/// Identity when the predictive standard deviation is zero.
pub fn lookahead_measure(
    measure: &GaussianMeasure,
    domain: &Domain,
    index: usize,
    v: f64,
) -> Result<GaussianMeasure> {
    domain.check_index(index)?;
    let s = predictive_sd(measure, domain, index);
    let mut out = measure.clone();
    if s > 0.0 {
        let value = measure.mean()[index] + v * s;
        out.condition_one_in_place(domain.noise_sd()[index], index, value)?;
    }
    Ok(out)
}

/// The pieces of a single-point update that do not depend on the outcome.
struct OneStepUpdate {
    /// Mean shift per unit standardized outcome: cov(u, x) / s(x).
    slope: Vec<f64>,
    /// cov(u, x) / sqrt(K), so that the covariance update is -w wᵀ.
    loading: Vec<f64>,
    /// Posterior standard deviations after the update.
    sds: Vec<f64>,
}

impl OneStepUpdate {
    /// None when observing at `index` is uninformative.
    fn new(measure: &GaussianMeasure, domain: &Domain, index: usize) -> Result<Option<Self>> {
        let tau = domain.noise_sd()[index];
        let gram = measure.variance(index) + tau * tau;
        if gram <= PINV_REL_TOL * gram.max(measure.scale()) {
            return Ok(None);
        }
        let s = gram.sqrt();
        let cov = measure.cov();
        let n = measure.len();
        let slope: Vec<f64> = (0..n).map(|u| cov[(u, index)] / s).collect();
        let loading = slope.clone();
        let floor = -NEG_VARIANCE_TOL * measure.scale().max(f64::MIN_POSITIVE);
        let mut sds = Vec::with_capacity(n);
        for u in 0..n {
            let var = cov[(u, u)] - loading[u] * loading[u];
            if var < floor {
                return Err(Error::Numerical(format!(
                    "lookahead variance {var:e} at index {u} is negative beyond round-off"
                )));
            }
            sds.push(var.max(0.0).sqrt());
        }
        Ok(Some(Self {
            slope,
            loading,
            sds,
        }))
    }
}

fn ibv_lookahead(
    measure: &GaussianMeasure,
    domain: &Domain,
    update: &OneStepUpdate,
    threshold: f64,
    v: f64,
) -> f64 {
    let mean = measure.mean();
    domain
        .weights()
        .iter()
        .enumerate()
        .map(|(u, w)| {
            let p = excursion_prob(mean[u] + update.slope[u] * v, update.sds[u], threshold);
            w * p * (1.0 - p)
        })
        .sum::<f64>()
        .max(0.0)
}

/// Σᵢ wᵢ VEV(νᵢ) sharing the outcome-independent correlations across nodes.
fn vev_lookahead(
    measure: &GaussianMeasure,
    domain: &Domain,
    update: &OneStepUpdate,
    threshold: f64,
    rule: &QuadratureRule,
) -> Result<f64> {
    use crate::special::{std_normal_sf, BvnCorrelation};
    let n = measure.len();
    let mean = measure.mean();
    let cov = measure.cov();
    let weights = domain.weights();
    let nodes = rule.len();
    let active: Vec<usize> = (0..n)
        .filter(|&u| update.sds[u] > 0.0 && weights[u] > 0.0)
        .collect();
    // h[i][u], tail[i][u], q[i][u] per node.
    let mut h = vec![vec![0.0; n]; nodes];
    let mut tail = vec![vec![0.0; n]; nodes];
    let mut q = vec![vec![0.0; n]; nodes];
    let mut per_node = vec![0.0; nodes];
    for (i, &v) in rule.nodes.iter().enumerate() {
        for u in 0..n {
            let m = mean[u] + update.slope[u] * v;
            let p = excursion_prob(m, update.sds[u], threshold);
            q[i][u] = p * (1.0 - p);
            per_node[i] += weights[u] * weights[u] * q[i][u];
            if update.sds[u] > 0.0 {
                h[i][u] = (threshold - m) / update.sds[u];
                tail[i][u] = std_normal_sf(h[i][u]);
            }
        }
    }
    for (a, &u) in active.iter().enumerate() {
        for &w in &active[a + 1..] {
            let bound_any = (0..nodes).any(|i| (q[i][u] * q[i][w]).sqrt() >= 1e-12);
            if !bound_any {
                continue;
            }
            let c = cov[(u, w)] - update.loading[u] * update.loading[w];
            let c = functionals::repaired_cov(c, update.sds[u], update.sds[w])?;
            let corr = BvnCorrelation::new(c / (update.sds[u] * update.sds[w]));
            let pair_weight = 2.0 * weights[u] * weights[w];
            for i in 0..nodes {
                if (q[i][u] * q[i][w]).sqrt() < 1e-12 {
                    continue;
                }
                let joint = corr.upper_orthant(h[i][u], h[i][w]);
                per_node[i] += pair_weight * (joint - tail[i][u] * tail[i][w]);
            }
        }
    }
    Ok(per_node
        .iter()
        .zip(&rule.weights)
        .map(|(value, w)| w * value.max(0.0))
        .sum())
}

/// J_x by quadrature over the standardized next observation.
///
/// KG and EI reuse the base path draws at every node, and H is the
/// conditional estimate from the same draws; the reported standard error is
/// that of the paired per-draw difference. Their J is clamped at zero node by
/// node like H itself, but the gain is taken between the unclamped estimates
/// so that it stays unbiased.
pub fn j_quadrature(
    measure: &GaussianMeasure,
    domain: &Domain,
    index: usize,
    spec: &FunctionalSpec,
    rule: &QuadratureRule,
    seed: u64,
) -> Result<CriterionValue> {
    domain.check_index(index)?;
    if rule.is_empty() {
        return Err(Error::Parameter("quadrature rule is empty".into()));
    }
    match spec.functional {
        Functional::Ibv { threshold } => {
            let h = eval(spec, measure, domain, seed)?;
            let j = match OneStepUpdate::new(measure, domain, index)? {
                None => h.value,
                Some(update) => {
                    rule.expect(|v| ibv_lookahead(measure, domain, &update, threshold, v))
                }
            };
            Ok(CriterionValue {
                j,
                gain: h.value - j,
                stderr: 0.0,
            })
        }
        Functional::Vev { threshold } => {
            let h = eval(spec, measure, domain, seed)?;
            let j = match OneStepUpdate::new(measure, domain, index)? {
                None => h.value,
                Some(update) => vev_lookahead(measure, domain, &update, threshold, rule)?,
            };
            Ok(CriterionValue {
                j,
                gain: h.value - j,
                stderr: 0.0,
            })
        }
        Functional::Kg | Functional::Ei => {
            j_quadrature_paired(measure, domain, index, spec, rule, seed)
        }
    }
}

/// Outcome-independent pieces of a KG/EI lookahead. The lookahead
/// covariance does not depend on the outcome and the mean moves along
/// `slope`, so one factorization serves every outcome: lookahead paths are
/// base paths shifted by slope·v, which is what evaluating each lookahead
/// measure with the same seed would draw.
struct PairedLookahead {
    n: usize,
    is_kg: bool,
    base_mean: Vec<f64>,
    slope: Vec<f64>,
    /// Centered base paths, None when E[max] is exact for the lookahead.
    deviations: Option<Vec<f64>>,
    /// Points whose mean defines the EI baseline (unused for KG).
    known: Vec<usize>,
    /// Per-draw E_V[max ξ | base draw], the conditional estimate of E_n[max ξ].
    conditional: Vec<f64>,
    /// The subtracted baseline of H under the current measure.
    reference: f64,
}

impl PairedLookahead {
    fn new(
        measure: &GaussianMeasure,
        domain: &Domain,
        index: usize,
        spec: &FunctionalSpec,
        seed: u64,
    ) -> Result<Self> {
        let mc = spec.mc_samples;
        let n = measure.len();
        let is_kg = matches!(spec.functional, Functional::Kg);
        let base = lookahead_measure(measure, domain, index, 0.0)?;
        let slope: Vec<f64> = match OneStepUpdate::new(measure, domain, index)? {
            Some(update) if predictive_sd(measure, domain, index) > 0.0 => update.slope,
            _ => vec![0.0; n],
        };
        // E[max ξ] is known exactly for degenerate measures and for KG on a
        // single point; `eval` short-circuits those, so the paired draws must too.
        let exact_max = |m: &GaussianMeasure| m.is_degenerate() || (n == 1 && is_kg);
        let deviations = if exact_max(&base) {
            None
        } else {
            path_deviations(&base, mc, seed)?
        };
        let (known, reference) = if is_kg {
            (Vec::new(), max_mean(measure))
        } else {
            require_noiseless(domain)?;
            let known = zero_variance_set(&base, spec.zero_sd_tol);
            if known.is_empty() {
                return Err(Error::State(
                    "expected improvement is undefined before the first noiseless observation"
                        .into(),
                ));
            }
            (known, best_known_value(measure, spec.zero_sd_tol)?)
        };
        let mut look = Self {
            n,
            is_kg,
            base_mean: base.mean().to_vec(),
            slope,
            deviations,
            known,
            conditional: Vec::new(),
            reference,
        };
        look.conditional = if exact_max(measure) {
            vec![max_mean(measure); mc]
        } else {
            (0..mc)
                .map(|s| expected_max_line(&look.draw_intercepts(s), &look.slope))
                .collect()
        };
        Ok(look)
    }

    /// H(ν) from the conditional draws. ξ = base path + slope·V with V
    /// independent of the base path, so integrating V out per draw gives an
    /// unbiased estimate of E_n[max ξ] that, unlike plain path maxima, does
    /// not miss rare exceedances at x.
    fn h(&self) -> FunctionalValue {
        let (mean, stderr, available) = mean_and_stderr(&self.conditional);
        let raw = mean - self.reference;
        FunctionalValue {
            value: raw.max(0.0),
            stderr,
            raw,
            stderr_available: available,
        }
    }

    /// J = H exactly when observing x moves nothing.
    fn without_update(&self) -> Option<CriterionValue> {
        self.slope.iter().all(|&b| b == 0.0).then(|| {
            let h = self.h();
            CriterionValue {
                j: h.value,
                gain: 0.0,
                stderr: 0.0,
            }
        })
    }

    /// Lines (intercepts, slopes) whose maximum is the baseline at outcome v.
    fn baseline_lines(&self) -> (Vec<f64>, Vec<f64>) {
        if self.is_kg {
            (self.base_mean.clone(), self.slope.clone())
        } else {
            (
                self.known.iter().map(|&u| self.base_mean[u]).collect(),
                self.known.iter().map(|&u| self.slope[u]).collect(),
            )
        }
    }

    /// Intercepts of the lines of draw `s`.
    fn draw_intercepts(&self, s: usize) -> Vec<f64> {
        match &self.deviations {
            None => self.base_mean.clone(),
            Some(dev) => dev[s * self.n..(s + 1) * self.n]
                .iter()
                .zip(&self.base_mean)
                .map(|(e, m)| m + e)
                .collect(),
        }
    }
}

fn max_of(xs: &[f64]) -> f64 {
    xs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// E_V[max_u (a_u + b_u V)].
fn expected_max_line(a: &[f64], b: &[f64]) -> f64 {
    max_of(a) + expected_max_affine_gain(a, b)
}

fn j_quadrature_paired(
    measure: &GaussianMeasure,
    domain: &Domain,
    index: usize,
    spec: &FunctionalSpec,
    rule: &QuadratureRule,
    seed: u64,
) -> Result<CriterionValue> {
    let look = PairedLookahead::new(measure, domain, index, spec, seed)?;
    if let Some(unchanged) = look.without_update() {
        return Ok(unchanged);
    }
    let (base_a, base_b) = look.baseline_lines();
    let intercepts: Vec<Vec<f64>> = (0..look.conditional.len())
        .map(|s| look.draw_intercepts(s))
        .collect();
    let mut diff = look.conditional.clone();
    let mut j = 0.0;
    let mut j_raw = 0.0;
    for (&v, &w) in rule.nodes.iter().zip(&rule.weights) {
        let baseline = base_a
            .iter()
            .zip(&base_b)
            .map(|(a, b)| a + b * v)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (d, a) in diff.iter_mut().zip(&intercepts) {
            let max = a
                .iter()
                .zip(&look.slope)
                .map(|(a, b)| a + b * v)
                .fold(f64::NEG_INFINITY, f64::max);
            sum += max;
            *d -= w * max;
        }
        let node = sum / diff.len() as f64 - baseline;
        j += w * node.max(0.0);
        j_raw += w * node;
    }
    let (_, stderr, _) = mean_and_stderr(&diff);
    Ok(CriterionValue {
        j,
        gain: look.h().raw - j_raw,
        stderr,
    })
}

/// J_x with the outcome integral done exactly. IBV/VEV use the closed forms;
/// for KG/EI each base path draw gives a maximum of lines in the outcome,
/// integrated through the upper envelope. H comes from the same draws, so
/// the gain has no Monte Carlo error left.
pub fn j_outcome_exact(
    measure: &GaussianMeasure,
    domain: &Domain,
    index: usize,
    spec: &FunctionalSpec,
    seed: u64,
) -> Result<CriterionValue> {
    domain.check_index(index)?;
    match spec.functional {
        Functional::Ibv { threshold } => ibv_exact(
            measure,
            domain,
            index,
            threshold,
            &eval(spec, measure, domain, seed)?,
        ),
        Functional::Vev { threshold } => vev_exact(
            measure,
            domain,
            index,
            threshold,
            &eval(spec, measure, domain, seed)?,
        ),
        Functional::Kg | Functional::Ei => {
            let look = PairedLookahead::new(measure, domain, index, spec, seed)?;
            if let Some(unchanged) = look.without_update() {
                return Ok(unchanged);
            }
            let (base_a, base_b) = look.baseline_lines();
            let mean = look.conditional.iter().sum::<f64>() / look.conditional.len() as f64;
            let j_raw = mean - expected_max_line(&base_a, &base_b);
            // H and J share every draw, so the gain carries no Monte Carlo error.
            Ok(CriterionValue {
                j: j_raw.max(0.0),
                gain: look.h().raw - j_raw,
                stderr: 0.0,
            })
        }
    }
}

/// J_x by quadrature with an arbitrary functional, one full conditioning per
/// node. Reference route for checks; the standard error combines the
/// per-evaluation errors as if independent.
pub fn j_quadrature_generic(
    measure: &GaussianMeasure,
    domain: &Domain,
    index: usize,
    rule: &QuadratureRule,
    functional: &(dyn Fn(&GaussianMeasure) -> Result<FunctionalValue> + Sync),
) -> Result<CriterionValue> {
    domain.check_index(index)?;
    let h = functional(measure)?;
    let mut j = 0.0;
    let mut var = h.stderr * h.stderr;
    for (&v, &w) in rule.nodes.iter().zip(&rule.weights) {
        let node = lookahead_measure(measure, domain, index, v)?;
        let value = functional(&node)?;
        j += w * value.value;
        var += (w * value.stderr).powi(2);
    }
    Ok(CriterionValue {
        j,
        gain: h.value - j,
        stderr: var.sqrt(),
    })
}

/// Exact EI gain E_n[(ξ(x) - M_n)⁺] = γ(m(x) - M_n, σ²(x)).
pub fn ei_closed(
    measure: &GaussianMeasure,
    domain: &Domain,
    index: usize,
    zero_sd_tol: f64,
    h: &FunctionalValue,
) -> Result<CriterionValue> {
    domain.check_index(index)?;
    require_noiseless(domain)?;
    let best = best_known_value(measure, zero_sd_tol)?;
    let var = measure.variance(index);
    let a = measure.mean()[index] - best;
    let gain = if measure.cov()[(index, index)] <= zero_variance_level(measure, zero_sd_tol) {
        a.max(0.0)
    } else {
        gamma_ei(a, var)
    };
    Ok(CriterionValue {
        j: (h.value - gain).max(0.0),
        gain,
        stderr: h.stderr,
    })
}

/// Per-point pieces of the exact IBV/VEV gains: with Y_u = m(u) + b_u V + c_u ε_u,
/// the lookahead excursion probability is p_u(V) = P(Y_u ≥ T | V) and
/// E_V[p_u(V) p_w(V)] = P(Y_u ≥ T, Y_w ≥ T), an orthant probability with
/// correlation r_u r_w, r_u = b_u / s(u).
struct ExcursionLoadings {
    h: Vec<f64>,
    r: Vec<f64>,
    p: Vec<f64>,
    /// Var_V(p_u(V)).
    var: Vec<f64>,
}

impl ExcursionLoadings {
    fn new(
        measure: &GaussianMeasure,
        domain: &Domain,
        index: usize,
        threshold: f64,
    ) -> Result<Option<Self>> {
        domain.check_index(index)?;
        let Some(update) = OneStepUpdate::new(measure, domain, index)? else {
            return Ok(None);
        };
        let n = measure.len();
        let mut out = Self {
            h: vec![0.0; n],
            r: vec![0.0; n],
            p: vec![0.0; n],
            var: vec![0.0; n],
        };
        for u in 0..n {
            let sd = measure.sd(u);
            out.p[u] = excursion_prob(measure.mean()[u], sd, threshold);
            if sd > 0.0 {
                out.h[u] = (threshold - measure.mean()[u]) / sd;
                out.r[u] = (update.slope[u] / sd).clamp(-1.0, 1.0);
                let joint = bvn_orthant(out.h[u], out.h[u], out.r[u] * out.r[u]);
                out.var[u] = (joint - out.p[u] * out.p[u]).max(0.0);
            }
        }
        Ok(Some(out))
    }
}

/// Exact IBV gain Σ_u μ(u) Var_V(p_u(V)), without quadrature error.
pub fn ibv_exact(
    measure: &GaussianMeasure,
    domain: &Domain,
    index: usize,
    threshold: f64,
    h: &FunctionalValue,
) -> Result<CriterionValue> {
    let gain = match ExcursionLoadings::new(measure, domain, index, threshold)? {
        None => 0.0,
        Some(l) => domain
            .weights()
            .iter()
            .zip(&l.var)
            .map(|(w, v)| w * v)
            .sum(),
    };
    Ok(CriterionValue {
        j: (h.value - gain).max(0.0),
        gain,
        stderr: 0.0,
    })
}

/// Exact VEV gain Var_V(E_{n+1}[α]) (law of total variance).
pub fn vev_exact(
    measure: &GaussianMeasure,
    domain: &Domain,
    index: usize,
    threshold: f64,
    h: &FunctionalValue,
) -> Result<CriterionValue> {
    let gain = match ExcursionLoadings::new(measure, domain, index, threshold)? {
        None => 0.0,
        Some(l) => {
            let weights = domain.weights();
            let active: Vec<usize> = (0..measure.len())
                .filter(|&u| l.var[u] > 0.0 && weights[u] > 0.0)
                .collect();
            let mut total = 0.0;
            for (a, &u) in active.iter().enumerate() {
                total += weights[u] * weights[u] * l.var[u];
                for &w in &active[a + 1..] {
                    if (l.var[u] * l.var[w]).sqrt() < 1e-12 {
                        continue;
                    }
                    let joint = bvn_orthant(l.h[u], l.h[w], l.r[u] * l.r[w]);
                    total += 2.0 * weights[u] * weights[w] * (joint - l.p[u] * l.p[w]);
                }
            }
            total.max(0.0)
        }
    };
    Ok(CriterionValue {
        j: (h.value - gain).max(0.0),
        gain,
        stderr: 0.0,
    })
}

/// E[max_u (a_u + b_u V)] - max_u a_u for standard normal V, from the upper
/// envelope of the lines.
pub fn expected_max_affine_gain(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    if a.is_empty() {
        return 0.0;
    }
    let mut lines: Vec<(f64, f64)> = a.iter().copied().zip(b.iter().copied()).collect();
    lines.sort_by(|x, y| x.1.total_cmp(&y.1).then(x.0.total_cmp(&y.0)));
    let slope_scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = SLOPE_MERGE_TOL * slope_scale;
    // Equal slopes: keep the larger intercept (the later one after sorting).
    let mut merged: Vec<(f64, f64)> = Vec::with_capacity(lines.len());
    for line in lines {
        match merged.last_mut() {
            Some(last) if (line.1 - last.1).abs() <= tol => {
                if line.0 >= last.0 {
                    *last = line;
                }
            }
            _ => merged.push(line),
        }
    }
    // Upper envelope: (intercept, slope, breakpoint where the line takes over).
    let mut hull: Vec<(f64, f64, f64)> = Vec::with_capacity(merged.len());
    for (ai, bi) in merged {
        loop {
            match hull.last() {
                None => {
                    hull.push((ai, bi, f64::NEG_INFINITY));
                    break;
                }
                Some(&(a0, b0, c0)) => {
                    let c = (a0 - ai) / (bi - b0);
                    if c <= c0 {
                        hull.pop();
                    } else {
                        hull.push((ai, bi, c));
                        break;
                    }
                }
            }
        }
    }
    hull.windows(2)
        .map(|pair| (pair[1].1 - pair[0].1) * positive_part_mean(-pair[1].2.abs()))
        .sum()
}

/// Exact KG gain at `index`: the posterior means after observing at x are
/// affine in the standardized outcome, a_u + b_u V.
pub fn kg_exact(
    measure: &GaussianMeasure,
    domain: &Domain,
    index: usize,
    h: &FunctionalValue,
) -> Result<CriterionValue> {
    domain.check_index(index)?;
    let s = predictive_sd(measure, domain, index);
    let gain = if s > 0.0 {
        let slopes: Vec<f64> = (0..measure.len())
            .map(|u| measure.cov()[(u, index)] / s)
            .collect();
        expected_max_affine_gain(measure.mean(), &slopes)
    } else {
        0.0
    };
    Ok(CriterionValue {
        j: (h.value - gain).max(0.0),
        gain,
        stderr: h.stderr,
    })
}

/// H and the criterion at every candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateEvaluation {
    pub h: FunctionalValue,
    pub candidates: Vec<usize>,
    pub values: Vec<CriterionValue>,
}

impl CandidateEvaluation {
    /// Position (into `candidates`) of the largest gain, lowest index on ties.
    pub fn best_position(&self) -> usize {
        let mut best = 0;
        for (pos, v) in self.values.iter().enumerate() {
            let cur = &self.values[best];
            if v.gain > cur.gain
                || (v.gain == cur.gain && self.candidates[pos] < self.candidates[best])
            {
                best = pos;
            }
        }
        best
    }

    pub fn min_j(&self) -> f64 {
        self.values
            .iter()
            .map(|v| v.j)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Evaluates every candidate with the best available method for the
/// functional: the exact gains, H evaluated once and shared.
pub fn evaluate_candidates(
    measure: &GaussianMeasure,
    domain: &Domain,
    spec: &FunctionalSpec,
    candidates: &[usize],
    seed: u64,
) -> Result<CandidateEvaluation> {
    if candidates.is_empty() {
        return Err(Error::Parameter("candidate set is empty".into()));
    }
    for &c in candidates {
        domain.check_index(c)?;
    }
    let h = eval(spec, measure, domain, seed)?;
    let values = candidates
        .par_iter()
        .map(|&x| match spec.functional {
            Functional::Kg => kg_exact(measure, domain, x, &h),
            Functional::Ei => ei_closed(measure, domain, x, spec.zero_sd_tol, &h),
            Functional::Ibv { threshold } => ibv_exact(measure, domain, x, threshold, &h),
            Functional::Vev { threshold } => vev_exact(measure, domain, x, threshold, &h),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CandidateEvaluation {
        h,
        candidates: candidates.to_vec(),
        values,
    })
}

/// The candidate with the largest expected gain (lowest index on ties).
pub fn max_expected_gain(
    measure: &GaussianMeasure,
    domain: &Domain,
    spec: &FunctionalSpec,
    candidates: &[usize],
    seed: u64,
) -> Result<(usize, CriterionValue)> {
    let evaluation = evaluate_candidates(measure, domain, spec, candidates, seed)?;
    let pos = evaluation.best_position();
    Ok((evaluation.candidates[pos], evaluation.values[pos]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_prior, condition, KernelFamily, KernelSpec, Observation};
    use crate::special::gauss_hermite_rule;
    use nalgebra::DMatrix;

    fn prior(n: usize) -> (Domain, GaussianMeasure) {
        let domain = Domain::grid_1d(0.0, 1.0, n).unwrap();
        let kernel = KernelSpec::new(KernelFamily::Matern52, 1.0, vec![0.25]);
        let prior = build_prior(&domain, 0.0, &kernel).unwrap();
        (domain, prior)
    }

    fn posterior() -> (Domain, GaussianMeasure) {
        let (domain, prior) = prior(7);
        let post = condition(
            &prior,
            &domain,
            &[
                Observation {
                    index: 1,
                    value: 0.6,
                },
                Observation {
                    index: 5,
                    value: -0.3,
                },
            ],
        )
        .unwrap();
        (domain, post)
    }

    #[test]
    fn lookahead_at_the_mean_zeroes_variance() {
        let (domain, post) = posterior();
        let look = lookahead_measure(&post, &domain, 3, 0.0).unwrap();
        assert!((look.mean()[3] - post.mean()[3]).abs() < 1e-14);
        assert!(look.cov()[(3, 3)].abs() < 1e-12);
    }

    #[test]
    fn lookahead_is_identity_at_known_points() {
        let (domain, post) = posterior();
        assert_eq!(lookahead_measure(&post, &domain, 1, 1.7).unwrap(), post);
    }

    #[test]
    fn lookahead_pair_reflects_means() {
        let (domain, post) = posterior();
        let up = lookahead_measure(&post, &domain, 3, 1.0).unwrap();
        let down = lookahead_measure(&post, &domain, 3, -1.0).unwrap();
        let mid = lookahead_measure(&post, &domain, 3, 0.0).unwrap();
        assert!((up.cov() - down.cov()).amax() < 1e-14);
        for u in 0..7 {
            assert!((up.mean()[u] + down.mean()[u] - 2.0 * mid.mean()[u]).abs() < 1e-13);
        }
    }

    #[test]
    fn fast_paths_match_full_conditioning() {
        let (domain, post) = posterior();
        let domain = domain.with_noise(vec![0.1; 7]).unwrap();
        let rule = gauss_hermite_rule(11).unwrap();
        for spec in [FunctionalSpec::ibv(0.2), FunctionalSpec::vev(-0.1)] {
            for x in 0..7 {
                let fast = j_quadrature(&post, &domain, x, &spec, &rule, 0).unwrap();
                let full =
                    j_quadrature_generic(&post, &domain, x, &rule, &|m| eval(&spec, m, &domain, 0))
                        .unwrap();
                assert!(
                    (fast.j - full.j).abs() < 1e-12,
                    "{spec:?} x={x}: {fast:?} {full:?}"
                );
            }
        }
    }

    #[test]
    fn shared_factor_paths_match_full_conditioning() {
        let (noiseless, post) = posterior();
        let noisy = noiseless.clone().with_noise(vec![0.1; 7]).unwrap();
        let rule = gauss_hermite_rule(11).unwrap();
        let cases = [
            (FunctionalSpec::kg().with_mc_samples(300), &noisy),
            (FunctionalSpec::ei().with_mc_samples(300), &noiseless),
        ];
        for (spec, domain) in cases {
            for x in 0..7 {
                let fast = j_quadrature(&post, domain, x, &spec, &rule, 5).unwrap();
                let full =
                    j_quadrature_generic(&post, domain, x, &rule, &|m| eval(&spec, m, domain, 5))
                        .unwrap();
                assert!(
                    (fast.j - full.j).abs() < 1e-10,
                    "{spec:?} x={x}: {fast:?} {full:?}"
                );
            }
        }
    }

    #[test]
    fn exact_outcome_integral_matches_dense_quadrature() {
        let (noiseless, post) = posterior();
        let noisy = noiseless.clone().with_noise(vec![0.1; 7]).unwrap();
        let rule = crate::special::trapezoid_normal_rule(20001, 9.0).unwrap();
        let cases = [
            (FunctionalSpec::kg().with_mc_samples(200), &noisy),
            (FunctionalSpec::ei().with_mc_samples(200), &noiseless),
        ];
        for (spec, domain) in cases {
            for x in 0..7 {
                let exact = j_outcome_exact(&post, domain, x, &spec, 3).unwrap();
                let quad = j_quadrature(&post, domain, x, &spec, &rule, 3).unwrap();
                // The quadrature route clamps each node's value at zero, which
                // moves it by a few 1e-6 here.
                assert!(
                    (exact.j - quad.j).abs() < 1e-5,
                    "{spec:?} x={x}: {exact:?} {quad:?}"
                );
                assert!((exact.stderr - quad.stderr).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn exact_excursion_gains_match_dense_quadrature() {
        let (domain, post) = posterior();
        let rule = crate::special::trapezoid_normal_rule(4001, 10.0).unwrap();
        for noise in [0.0, 0.05] {
            let domain = domain.clone().with_noise(vec![noise; 7]).unwrap();
            for x in 0..7 {
                let h = functionals::eval_ibv(&post, &domain, 0.2).unwrap();
                let exact = ibv_exact(&post, &domain, x, 0.2, &h).unwrap();
                let quad =
                    j_quadrature(&post, &domain, x, &FunctionalSpec::ibv(0.2), &rule, 0).unwrap();
                assert!(
                    (exact.gain - quad.gain).abs() < 1e-9,
                    "ibv x={x}: {exact:?} {quad:?}"
                );
                let h = functionals::eval_vev(&post, &domain, -0.1).unwrap();
                let exact = vev_exact(&post, &domain, x, -0.1, &h).unwrap();
                let quad =
                    j_quadrature(&post, &domain, x, &FunctionalSpec::vev(-0.1), &rule, 0).unwrap();
                assert!(
                    (exact.gain - quad.gain).abs() < 1e-9,
                    "vev x={x}: {exact:?} {quad:?}"
                );
            }
        }
    }

    #[test]
    fn degenerate_measure_has_no_gain() {
        let domain = Domain::grid_1d(0.0, 1.0, 4).unwrap();
        let m = GaussianMeasure::new(vec![0.1, 0.4, -0.2, 0.0], DMatrix::zeros(4, 4)).unwrap();
        let rule = gauss_hermite_rule(5).unwrap();
        for spec in [
            FunctionalSpec::ibv(0.0),
            FunctionalSpec::vev(0.0),
            FunctionalSpec::kg(),
            FunctionalSpec::ei(),
        ] {
            for x in 0..4 {
                let c = j_quadrature(&m, &domain, x, &spec, &rule, 1).unwrap();
                assert_eq!((c.j, c.gain), (0.0, 0.0));
            }
            let (best, c) = max_expected_gain(&m, &domain, &spec, &[3, 1, 2], 1).unwrap();
            assert_eq!(best, 1);
            assert_eq!(c.gain, 0.0);
        }
    }

    #[test]
    fn single_atom_ibv_is_resolved_in_one_step() {
        let domain = Domain::uniform(vec![vec![0.0]]).unwrap();
        let m = GaussianMeasure::new(vec![0.5], DMatrix::from_element(1, 1, 1.0)).unwrap();
        let rule = gauss_hermite_rule(25).unwrap();
        let c = j_quadrature(&m, &domain, 0, &FunctionalSpec::ibv(0.5), &rule, 0).unwrap();
        assert!(c.j.abs() < 1e-15);
        assert!((c.gain - 0.25).abs() < 1e-15);
    }

    #[test]
    fn one_node_rule_is_plug_in() {
        let (domain, post) = posterior();
        let rule = gauss_hermite_rule(1).unwrap();
        let spec = FunctionalSpec::vev(0.1);
        for x in 0..7 {
            let c = j_quadrature(&post, &domain, x, &spec, &rule, 0).unwrap();
            let plug = eval(
                &spec,
                &lookahead_measure(&post, &domain, x, 0.0).unwrap(),
                &domain,
                0,
            )
            .unwrap();
            assert!((c.j - plug.value).abs() < 1e-13);
        }
    }

    #[test]
    fn ei_closed_examples() {
        let cov = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![0.0, 1.0, 0.0]));
        let m = GaussianMeasure::new(vec![0.3, 0.3, -0.5], cov).unwrap();
        let domain = Domain::grid_1d(0.0, 1.0, 3).unwrap();
        let h = FunctionalValue::exact(0.4);
        assert_eq!(ei_closed(&m, &domain, 2, 1e-9, &h).unwrap().gain, 0.0);
        assert_eq!(ei_closed(&m, &domain, 0, 1e-9, &h).unwrap().gain, 0.0);
        let g = ei_closed(&m, &domain, 1, 1e-9, &h).unwrap().gain;
        assert!((g - 1.0 / (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-15);
        let unknown = GaussianMeasure::new(vec![0.0; 2], DMatrix::identity(2, 2)).unwrap();
        assert!(matches!(
            ei_closed(
                &unknown,
                &Domain::grid_1d(0.0, 1.0, 2).unwrap(),
                0,
                1e-9,
                &h
            ),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn kg_envelope_examples() {
        assert_eq!(
            expected_max_affine_gain(&[0.3, -1.0, 2.0], &[0.5, 0.5, 0.5]),
            0.0
        );
        let g = expected_max_affine_gain(&[0.0, 0.0], &[0.0, 1.0]);
        assert!((g - 1.0 / (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-15);
        // Dominated line in the middle is dropped.
        let with = expected_max_affine_gain(&[0.0, -10.0, 0.0], &[-1.0, 0.0, 1.0]);
        let without = expected_max_affine_gain(&[0.0, 0.0], &[-1.0, 1.0]);
        assert!((with - without).abs() < 1e-15);
    }

    #[test]
    fn kg_envelope_against_numerical_integration() {
        let a = [0.2, -0.1, 0.5, 0.0, 0.35];
        let b = [-0.8, 0.3, 0.05, 1.2, -0.2];
        // Trapezoid on [-12, 12] of max(a + b v) φ(v).
        let steps = 240_000;
        let mut acc = 0.0;
        for i in 0..=steps {
            let v = -12.0 + 24.0 * i as f64 / steps as f64;
            let top = a
                .iter()
                .zip(&b)
                .map(|(a, b)| a + b * v)
                .fold(f64::NEG_INFINITY, f64::max);
            let w = if i == 0 || i == steps { 0.5 } else { 1.0 };
            acc += w * top * crate::special::std_normal_pdf(v);
        }
        let integral = acc * 24.0 / steps as f64 - 0.5;
        let exact = expected_max_affine_gain(&a, &b);
        assert!((integral - exact).abs() < 1e-8, "{integral} vs {exact}");
    }

    #[test]
    fn ibv_argmax_by_exhaustion() {
        // One high-variance point carrying most of the mass.
        let domain = Domain::new(
            vec![vec![0.0], vec![0.5], vec![1.0]],
            vec![0.1, 0.8, 0.1],
            vec![0.0; 3],
        )
        .unwrap();
        let cov = DMatrix::from_row_slice(3, 3, &[0.2, 0.05, 0.0, 0.05, 2.0, 0.05, 0.0, 0.05, 0.2]);
        let m = GaussianMeasure::new(vec![0.1, 0.0, -0.1], cov).unwrap();
        let spec = FunctionalSpec::ibv(0.0);
        let rule = gauss_hermite_rule(25).unwrap();
        let gains: Vec<f64> = (0..3)
            .map(|x| j_quadrature(&m, &domain, x, &spec, &rule, 0).unwrap().gain)
            .collect();
        let brute = (0..3)
            .max_by(|&i, &j| gains[i].total_cmp(&gains[j]))
            .unwrap();
        let (best, _) = max_expected_gain(&m, &domain, &spec, &[0, 1, 2], 0).unwrap();
        assert_eq!(best, brute);
        assert_eq!(best, 1);
    }

    #[test]
    fn ibv_gain_profile_is_symmetric() {
        let (domain, prior) = prior(9);
        let rule = gauss_hermite_rule(25).unwrap();
        let spec = FunctionalSpec::ibv(0.0);
        let gains: Vec<f64> = (0..9)
            .map(|x| {
                j_quadrature(&prior, &domain, x, &spec, &rule, 0)
                    .unwrap()
                    .gain
            })
            .collect();
        for x in 0..9 {
            assert!((gains[x] - gains[8 - x]).abs() < 1e-8);
        }
    }
}
