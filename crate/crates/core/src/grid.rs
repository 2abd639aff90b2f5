//! Finite grids, covariance kernels, Gaussian measures on a grid and the
//! conditioning operator.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Eigenvalues of the observation Gram matrix below this fraction of the
/// reference scale are inverted as zero.
pub const PINV_REL_TOL: f64 = 1e-10;
/// Negative diagonal entries within this fraction of the scale are round-off.
pub const NEG_VARIANCE_TOL: f64 = 1e-8;
const JITTER_START: f64 = 1e-12;
const JITTER_MAX: f64 = 1e-6;

/// The index set: grid points with integration weights and observation noise.
#[derive(Debug, Clone, PartialEq)]
pub struct Domain {
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
    noise_sd: Vec<f64>,
}

impl Domain {
    pub fn new(points: Vec<Vec<f64>>, weights: Vec<f64>, noise_sd: Vec<f64>) -> Result<Self> {
        let n = points.len();
        if n == 0 {
            return Err(Error::Parameter("domain needs at least one point".into()));
        }
        if weights.len() != n || noise_sd.len() != n {
            return Err(Error::Parameter(format!(
                "domain lists disagree: {} points, {} weights, {} noise levels",
                n,
                weights.len(),
                noise_sd.len()
            )));
        }
        let dim = points[0].len();
        if !(1..=2).contains(&dim) || points.iter().any(|p| p.len() != dim) {
            return Err(Error::Parameter(
                "points must all have dimension 1 or all have dimension 2".into(),
            ));
        }
        if points.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::Parameter("point coordinates must be finite".into()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Parameter(
                "weights must be finite and nonnegative".into(),
            ));
        }
        if weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Parameter("total weight must be positive".into()));
        }
        if noise_sd.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(Error::Parameter(
                "noise standard deviations must be finite and nonnegative".into(),
            ));
        }
        Ok(Self {
            points,
            weights,
            noise_sd,
        })
    }

    /// Uniform weights 1/N, noiseless observations.
    pub fn uniform(points: Vec<Vec<f64>>) -> Result<Self> {
        let n = points.len().max(1);
        Self::new(points, vec![1.0 / n as f64; n], vec![0.0; n])
    }

    /// `resolution` equally spaced points on `[lower, upper]`.
    pub fn grid_1d(lower: f64, upper: f64, resolution: usize) -> Result<Self> {
        Self::uniform(
            linspace(lower, upper, resolution)
                .into_iter()
                .map(|x| vec![x])
                .collect(),
        )
    }

    /// Tensor grid, row-major in the first coordinate.
    pub fn grid_2d(lower: [f64; 2], upper: [f64; 2], resolution: usize) -> Result<Self> {
        let xs = linspace(lower[0], upper[0], resolution);
        let ys = linspace(lower[1], upper[1], resolution);
        let points = xs
            .iter()
            .flat_map(|&x| ys.iter().map(move |&y| vec![x, y]))
            .collect();
        Self::uniform(points)
    }

    pub fn with_noise(self, noise_sd: Vec<f64>) -> Result<Self> {
        Self::new(self.points, self.weights, noise_sd)
    }

    pub fn with_weights(self, weights: Vec<f64>) -> Result<Self> {
        Self::new(self.points, weights, self.noise_sd)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn noise_sd(&self) -> &[f64] {
        &self.noise_sd
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn is_noiseless(&self) -> bool {
        self.noise_sd.iter().all(|&t| t == 0.0)
    }

    pub(crate) fn check_index(&self, index: usize) -> Result<()> {
        if index < self.len() {
            Ok(())
        } else {
            Err(Error::Parameter(format!(
                "grid index {index} out of range for a domain of {} points",
                self.len()
            )))
        }
    }
}

fn linspace(lower: f64, upper: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.5 * (lower + upper)],
        _ => (0..n)
            .map(|i| lower + (upper - lower) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    SquaredExponential,
    Matern32,
    Matern52,
}

/// Stationary covariance kernel with per-coordinate lengthscales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub variance: f64,
    /// One lengthscale per coordinate, or a single value shared by all.
    pub lengthscale: Vec<f64>,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, variance: f64, lengthscale: Vec<f64>) -> Self {
        Self {
            family,
            variance,
            lengthscale,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        // A zero variance is accepted: it is the degenerate "no uncertainty" prior.
        if !(self.variance.is_finite() && self.variance >= 0.0) {
            return Err(Error::Parameter(format!(
                "kernel variance must be finite and nonnegative, got {}",
                self.variance
            )));
        }
        if self.lengthscale.len() != 1 && self.lengthscale.len() != dim {
            return Err(Error::Parameter(format!(
                "expected 1 or {dim} lengthscales, got {}",
                self.lengthscale.len()
            )));
        }
        if self
            .lengthscale
            .iter()
            .any(|l| !(l.is_finite() && *l > 0.0))
        {
            return Err(Error::Parameter("lengthscales must be positive".into()));
        }
        Ok(())
    }

    fn lengthscale(&self, axis: usize) -> f64 {
        if self.lengthscale.len() == 1 {
            self.lengthscale[0]
        } else {
            self.lengthscale[axis]
        }
    }

    /// Scaled distance r = ‖(x - y) / ℓ‖.
    fn distance(&self, x: &[f64], y: &[f64]) -> f64 {
        x.iter()
            .zip(y)
            .enumerate()
            .map(|(axis, (a, b))| ((a - b) / self.lengthscale(axis)).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        let r = self.distance(x, y);
        let shape = match self.family {
            KernelFamily::SquaredExponential => (-0.5 * r * r).exp(),
            KernelFamily::Matern32 => {
                let s = 3f64.sqrt() * r;
                (1.0 + s) * (-s).exp()
            }
            KernelFamily::Matern52 => {
                let s = 5f64.sqrt() * r;
                (1.0 + s + s * s / 3.0) * (-s).exp()
            }
        };
        self.variance * shape
    }
}

/// One noisy evaluation of the latent function at a grid index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub index: usize,
    pub value: f64,
}

/// A Gaussian measure on the grid, given by its mean vector and covariance
/// matrix.
///
/// `scale` is the largest prior variance; it is carried through
/// conditioning and anchors every relative numerical tolerance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMeasure {
    mean: Vec<f64>,
    cov: DMatrix<f64>,
    scale: f64,
}

impl GaussianMeasure {
    /// Validates symmetry and numerical positive semidefiniteness.
    pub fn new(mean: Vec<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if n == 0 || cov.nrows() != n || cov.ncols() != n {
            return Err(Error::Parameter(format!(
                "mean has length {n} but covariance is {}x{}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Parameter(
                "mean and covariance must be finite".into(),
            ));
        }
        let scale = (0..n).map(|i| cov[(i, i)]).fold(0.0, f64::max);
        let measure = Self { mean, cov, scale };
        measure.check_invariants()?;
        Ok(measure)
    }

    /// Checks symmetry (1e-12 relative) and the eigenvalue floor
    /// -1e-8·trace/N.
    pub fn check_invariants(&self) -> Result<()> {
        let n = self.len();
        let magnitude = self.cov.amax().max(f64::MIN_POSITIVE);
        for i in 0..n {
            if self.cov[(i, i)] < 0.0 {
                return Err(Error::Numerical(format!("negative variance at index {i}")));
            }
            for j in 0..i {
                if (self.cov[(i, j)] - self.cov[(j, i)]).abs() > 1e-12 * magnitude {
                    return Err(Error::Numerical(format!(
                        "covariance not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        let trace = self.cov.trace();
        if trace > 0.0 {
            let sym = (&self.cov + self.cov.transpose()) * 0.5;
            let min_eig = SymmetricEigen::new(sym).eigenvalues.min();
            if min_eig < -1e-8 * trace / n as f64 {
                return Err(Error::Numerical(format!(
                    "covariance is not positive semidefinite (smallest eigenvalue {min_eig:e})"
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Posterior variance at `i`, clamped at zero.
    pub fn variance(&self, i: usize) -> f64 {
        self.cov[(i, i)].max(0.0)
    }

    pub fn sd(&self, i: usize) -> f64 {
        self.variance(i).sqrt()
    }

    pub fn variances(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.variance(i)).collect()
    }

    /// True when no grid value is uncertain.
    pub fn is_degenerate(&self) -> bool {
        (0..self.len()).all(|i| self.cov[(i, i)] <= 0.0)
    }

    /// Same measure with every mean shifted by `c`.
    pub fn shifted(&self, c: f64) -> Self {
        Self {
            mean: self.mean.iter().map(|m| m + c).collect(),
            cov: self.cov.clone(),
            scale: self.scale,
        }
    }

    /// Threshold below which an eigenvalue (or a scalar Gram entry) is
    /// treated as zero.
    fn pinv_threshold(&self, largest: f64) -> f64 {
        PINV_REL_TOL * largest.max(self.scale)
    }

    /// Conditions in place on one observation. Returns false when the
    /// observation carries no information (zero predictive variance).
    pub(crate) fn condition_one_in_place(
        &mut self,
        noise_sd: f64,
        index: usize,
        value: f64,
    ) -> Result<bool> {
        let gram = self.cov[(index, index)].max(0.0) + noise_sd * noise_sd;
        if gram <= self.pinv_threshold(gram) {
            return Ok(false);
        }
        let n = self.len();
        let column: Vec<f64> = self.cov.column(index).iter().copied().collect();
        let innovation = (value - self.mean[index]) / gram;
        for (m, c) in self.mean.iter_mut().zip(&column) {
            *m += c * innovation;
        }
        for j in 0..n {
            let cj = column[j] / gram;
            if cj == 0.0 {
                continue;
            }
            let mut col = self.cov.column_mut(j);
            for i in 0..n {
                col[i] -= column[i] * cj;
            }
        }
        self.finalize()?;
        Ok(true)
    }

    /// Symmetrizes and clamps round-off negative variances.
    fn finalize(&mut self) -> Result<()> {
        let n = self.len();
        for j in 0..n {
            for i in 0..j {
                let avg = 0.5 * (self.cov[(i, j)] + self.cov[(j, i)]);
                self.cov[(i, j)] = avg;
                self.cov[(j, i)] = avg;
            }
        }
        for i in 0..n {
            let v = self.cov[(i, i)];
            if v < 0.0 {
                if v < -NEG_VARIANCE_TOL * self.scale.max(f64::MIN_POSITIVE) {
                    return Err(Error::Numerical(format!(
                        "posterior variance {v:e} at index {i} is negative beyond round-off"
                    )));
                }
                self.cov[(i, i)] = 0.0;
            }
        }
        Ok(())
    }
}

/// Prior measure with constant mean and kernel covariance on the grid.
pub fn build_prior(
    domain: &Domain,
    mean_const: f64,
    kernel: &KernelSpec,
) -> Result<GaussianMeasure> {
    kernel.validate(domain.dim())?;
    if !mean_const.is_finite() {
        return Err(Error::Parameter("prior mean must be finite".into()));
    }
    let n = domain.len();
    let points = domain.points();
    let cov = DMatrix::from_fn(n, n, |i, j| kernel.eval(&points[i], &points[j]));
    Ok(GaussianMeasure {
        mean: vec![mean_const; n],
        cov,
        scale: kernel.variance,
    })
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

/// Posterior measure given a batch of observations, using the pseudo-inverse
/// of the (noisy) Gram matrix.
pub fn condition(
    measure: &GaussianMeasure,
    domain: &Domain,
    obs: &[Observation],
) -> Result<GaussianMeasure> {
    check_bound(measure, domain)?;
    for o in obs {
        domain.check_index(o.index)?;
        if !o.value.is_finite() {
            return Err(Error::Parameter("observed values must be finite".into()));
        }
    }
    if obs.is_empty() {
        return Ok(measure.clone());
    }
    let n = measure.len();
    let q = obs.len();
    let tau = domain.noise_sd();
    let gram = DMatrix::from_fn(q, q, |a, b| {
        let (i, j) = (obs[a].index, obs[b].index);
        measure.cov[(i, j)] + if a == b { tau[i] * tau[i] } else { 0.0 }
    });
    let eig = SymmetricEigen::new(gram);
    let largest = eig.eigenvalues.max();
    let cutoff = measure.pinv_threshold(largest);
    let inv_vals = eig
        .eigenvalues
        .map(|l| if l > cutoff { 1.0 / l } else { 0.0 });
    let pinv = &eig.eigenvectors * DMatrix::from_diagonal(&inv_vals) * eig.eigenvectors.transpose();
    let cross = DMatrix::from_fn(n, q, |u, a| measure.cov[(u, obs[a].index)]);
    let gain = &cross * &pinv;
    let residual = nalgebra::DVector::from_fn(q, |a, _| obs[a].value - measure.mean[obs[a].index]);
    let shift = &gain * residual;
    let mut out = GaussianMeasure {
        mean: measure
            .mean
            .iter()
            .zip(shift.iter())
            .map(|(m, s)| m + s)
            .collect(),
        cov: &measure.cov - &gain * cross.transpose(),
        scale: measure.scale,
    };
    out.finalize()?;
    Ok(out)
}

/// Posterior after a single observation; equal to `condition` with one
/// element but O(N²).
pub fn condition_one(
    measure: &GaussianMeasure,
    domain: &Domain,
    obs: Observation,
) -> Result<GaussianMeasure> {
    check_bound(measure, domain)?;
    domain.check_index(obs.index)?;
    let mut out = measure.clone();
    out.condition_one_in_place(domain.noise_sd()[obs.index], obs.index, obs.value)?;
    Ok(out)
}

/// sqrt(k_n(x, x) + τ²(x)): the standard deviation of the next observation at `index`.
pub fn predictive_sd(measure: &GaussianMeasure, domain: &Domain, index: usize) -> f64 {
    let tau = domain.noise_sd()[index];
    (measure.variance(index) + tau * tau).sqrt()
}

/// Draws correlated Gaussian vectors from a measure using a lower-triangular
/// factor of the (jittered) covariance.
#[derive(Debug, Clone)]
pub struct PathSampler {
    mean: Vec<f64>,
    /// Packed row-major lower triangle; empty for a degenerate measure.
    factor: Vec<f64>,
}

impl PathSampler {
    pub fn new(measure: &GaussianMeasure) -> Result<Self> {
        let n = measure.len();
        let trace: f64 = (0..n).map(|i| measure.variance(i)).sum();
        // Variances below the conditioning cutoff are round-off, not spread.
        let max_var = (0..n).map(|i| measure.variance(i)).fold(0.0, f64::max);
        if trace <= 0.0 || max_var <= PINV_REL_TOL * measure.scale {
            return Ok(Self {
                mean: measure.mean.clone(),
                factor: Vec::new(),
            });
        }
        let base = trace / n as f64;
        // Conditioning round-off scales with the prior variance, so a mostly
        // resolved measure may need more jitter than its own trace suggests.
        let ceiling = JITTER_MAX * base.max(measure.scale);
        let mut jitter = JITTER_START * base;
        loop {
            let mut shifted = measure.cov.clone();
            for i in 0..n {
                shifted[(i, i)] += jitter;
            }
            if let Some(chol) = shifted.cholesky() {
                let l = chol.l();
                let mut factor = Vec::with_capacity(n * (n + 1) / 2);
                for i in 0..n {
                    for j in 0..=i {
                        factor.push(l[(i, j)]);
                    }
                }
                return Ok(Self {
                    mean: measure.mean.clone(),
                    factor,
                });
            }
            if jitter >= ceiling {
                return Err(Error::Numerical(format!(
                    "covariance factorization failed with jitter up to {ceiling:e}"
                )));
            }
            jitter = (jitter * 10.0).min(ceiling);
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn is_degenerate(&self) -> bool {
        self.factor.is_empty()
    }

    /// mean + L·z for a vector `z` of standard normals.
    pub fn sample_into(&self, z: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.mean);
        if self.factor.is_empty() {
            return;
        }
        let mut offset = 0;
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.factor[offset..offset + i + 1];
            *o += row.iter().zip(&z[..=i]).map(|(l, z)| l * z).sum::<f64>();
            offset += i + 1;
        }
    }

    pub fn sample_with_seed(&self, seed: u64) -> Vec<f64> {
        let z = rng::standard_normals(seed, self.len());
        let mut out = vec![0.0; self.len()];
        self.sample_into(&z, &mut out);
        out
    }
}

/// One sample path of the measure on the grid; deterministic given `seed`.
pub fn sample_path(measure: &GaussianMeasure, seed: u64) -> Result<Vec<f64>> {
    Ok(PathSampler::new(measure)?.sample_with_seed(seed))
}

/// Z = ξ(x) + τ(x)·U with U standard normal drawn from `seed`.
pub fn simulate_observation(
    truth: &[f64],
    domain: &Domain,
    index: usize,
    seed: u64,
) -> Result<Observation> {
    domain.check_index(index)?;
    if truth.len() != domain.len() {
        return Err(Error::Parameter(
            "truth vector does not match the domain".into(),
        ));
    }
    let tau = domain.noise_sd()[index];
    let value = if tau > 0.0 {
        truth[index] + tau * rng::standard_normals(seed, 1)[0]
    } else {
        truth[index]
    };
    Ok(Observation { index, value })
}
