//! Scalar numerical kernels: normal pdf/cdf, the EI expectation, excursion
//! probabilities, bivariate orthant probabilities and Gauss–Hermite rules.

#![allow(clippy::excessive_precision)]

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{Error, Result};

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_677_94;

pub fn std_normal_pdf(t: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * t * t).exp()
}

/// Standard normal distribution function Φ(t).
pub fn std_normal_cdf(t: f64) -> f64 {
    0.5 * libm::erfc(-t * FRAC_1_SQRT_2)
}

/// Upper tail Φ̄(t) = P(Z ≥ t), computed without cancellation for large t.
pub fn std_normal_sf(t: f64) -> f64 {
    0.5 * libm::erfc(t * FRAC_1_SQRT_2)
}

/// P(ξ ≥ threshold) for ξ ~ N(mean, sd²). A degenerate Gaussian (sd = 0)
/// puts all its mass on `mean`, and `mean == threshold` counts as an excursion.
pub fn excursion_prob(mean: f64, sd: f64, threshold: f64) -> f64 {
    if sd > 0.0 {
        std_normal_sf((threshold - mean) / sd)
    } else if mean >= threshold {
        1.0
    } else {
        0.0
    }
}

/// `z Φ(z) + φ(z)`, i.e. E[(Z + z)⁺] for standard normal Z.
pub(crate) fn positive_part_mean(z: f64) -> f64 {
    if z > -4.0 {
        return z * std_normal_cdf(z) + std_normal_pdf(z);
    }
    // Left tail: with t = -z, (zΦ(z) + φ(z)) / φ(t) = R(t)·(1/R(t) - t), where
    // R is the Mills ratio. Both factors come out of one continued fraction
    // D_k = t + k / D_{k+1}, evaluated backwards: R = 1/D_1 and 1/R - t = 1/D_2.
    let t = -z;
    let mut d = t;
    for k in (2..=120).rev() {
        d = t + k as f64 / d;
    }
    let d1 = t + 1.0 / d;
    std_normal_pdf(t) / (d1 * d)
}

/// γ(a, b) = E[(Z)⁺] for Z ~ N(a, b); `b` is a variance.
pub fn gamma_ei(a: f64, b: f64) -> f64 {
    if b > 0.0 {
        let s = b.sqrt();
        let value = s * positive_part_mean(a / s);
        value.max(a)
    } else {
        a.max(0.0)
    }
}

// Gauss–Legendre half-rules on [-1, 1] (abscissae negative, weights for one side).
const GL6: [(f64, f64); 3] = [
    (0.171_324_492_379_170_3, -0.932_469_514_203_152_1),
    (0.360_761_573_048_138_4, -0.661_209_386_466_264_5),
    (0.467_913_934_572_691_0, -0.238_619_186_083_197_0),
];

const GL12: [(f64, f64); 6] = [
    (0.047_175_336_386_511_77, -0.981_560_634_246_719_1),
    (0.106_939_325_995_318_3, -0.904_117_256_370_475_0),
    (0.160_078_328_543_346_4, -0.769_902_674_194_305_0),
    (0.203_167_426_723_065_9, -0.587_317_954_286_617_1),
    (0.233_492_536_538_354_7, -0.367_831_498_998_180_2),
    (0.249_147_045_813_402_9, -0.125_233_408_511_469_2),
];

const GL20: [(f64, f64); 10] = [
    (0.017_614_007_139_152_12, -0.993_128_599_185_094_9),
    (0.040_601_429_800_386_94, -0.963_971_927_277_913_8),
    (0.062_672_048_334_109_06, -0.912_234_428_251_325_9),
    (0.083_276_741_576_704_75, -0.839_116_971_822_218_8),
    (0.101_930_119_817_240_4, -0.746_331_906_460_150_8),
    (0.118_194_531_961_518_4, -0.636_053_680_726_515_0),
    (0.131_688_638_449_176_6, -0.510_867_001_950_827_1),
    (0.142_096_109_318_382_1, -0.373_706_088_715_419_6),
    (0.149_172_986_472_603_7, -0.227_785_851_141_645_1),
    (0.152_753_387_130_725_9, -0.076_526_521_133_497_33),
];

fn gl_rule(abs_rho: f64) -> &'static [(f64, f64)] {
    if abs_rho < 0.3 {
        &GL6
    } else if abs_rho < 0.75 {
        &GL12
    } else {
        &GL20
    }
}

/// Upper orthant probability P(Z₁ ≥ h, Z₂ ≥ k) for standard bivariate
/// normal with correlation `rho`.
///
/// Drezner–Wesolowsky integration over the correlation parameter with a
/// fixed Gauss–Legendre rule, using Genz's refinements near |ρ| = 1.
pub fn bvn_orthant(h: f64, k: f64, rho: f64) -> f64 {
    BvnCorrelation::new(rho).upper_orthant(h, k)
}

/// The ρ-dependent part of [`bvn_orthant`], reusable across many (h, k).
#[derive(Debug, Clone)]
pub struct BvnCorrelation {
    rho: f64,
    /// For |ρ| < 0.925: (w·asr/4π, sin θ, 1/(1 - sin²θ)) per Gauss–Legendre node.
    terms: Vec<(f64, f64, f64)>,
}

impl BvnCorrelation {
    pub fn new(rho: f64) -> Self {
        let rho = if rho.is_nan() {
            0.0
        } else {
            rho.clamp(-1.0, 1.0)
        };
        let mut terms = Vec::new();
        if rho.abs() < 0.925 && rho != 0.0 {
            let asr = rho.asin();
            let factor = asr / (4.0 * PI);
            for &(w, x) in gl_rule(rho.abs()) {
                for sgn in [1.0, -1.0] {
                    let sn = (0.5 * asr * (sgn * x + 1.0)).sin();
                    terms.push((w * factor, sn, 1.0 / (1.0 - sn * sn)));
                }
            }
        }
        Self { rho, terms }
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn upper_orthant(&self, h: f64, k: f64) -> f64 {
        let rho = self.rho;
        if rho == 0.0 {
            return std_normal_sf(h) * std_normal_sf(k);
        }
        if rho.abs() < 0.925 {
            let hk = h * k;
            let hs = 0.5 * (h * h + k * k);
            let sum: f64 = self
                .terms
                .iter()
                .map(|&(w, sn, inv)| w * ((sn * hk - hs) * inv).exp())
                .sum();
            return (sum + std_normal_sf(h) * std_normal_sf(k)).clamp(0.0, 1.0);
        }
        high_correlation_orthant(h, k, rho)
    }
}

fn high_correlation_orthant(h: f64, k: f64, rho: f64) -> f64 {
    let rule = gl_rule(rho.abs());
    let mut k = k;
    let mut hk = h * k;
    let mut bvn = 0.0;
    if rho < 0.0 {
        k = -k;
        hk = -hk;
    }
    if rho.abs() < 1.0 {
        let a_s = (1.0 - rho) * (1.0 + rho);
        let mut a = a_s.sqrt();
        let bs = (h - k) * (h - k);
        let c = (4.0 - hk) / 8.0;
        let d = (12.0 - hk) / 16.0;
        bvn = a
            * (-0.5 * (bs / a_s + hk)).exp()
            * (1.0 - c * (bs - a_s) * (1.0 - d * bs / 5.0) / 3.0 + c * d * a_s * a_s / 5.0);
        if hk > -160.0 {
            let b = bs.sqrt();
            bvn -= (-0.5 * hk).exp()
                * (2.0 * PI).sqrt()
                * std_normal_cdf(-b / a)
                * b
                * (1.0 - c * bs * (1.0 - d * bs / 5.0) / 3.0);
        }
        a *= 0.5;
        for &(w, x) in rule {
            for sgn in [1.0, -1.0] {
                let xs = (a * (sgn * x + 1.0)).powi(2);
                let rs = (1.0 - xs).sqrt();
                let asr = -0.5 * (bs / xs + hk);
                if asr > -100.0 {
                    bvn += a
                        * w
                        * asr.exp()
                        * ((-hk * (1.0 - rs) / (2.0 * (1.0 + rs))).exp() / rs
                            - (1.0 + c * xs * (1.0 + d * xs)));
                }
            }
        }
        bvn = -bvn / (2.0 * PI);
    }
    if rho > 0.0 {
        bvn += std_normal_cdf(-h.max(k));
    } else {
        bvn = -bvn;
        if k > h {
            if h < 0.0 {
                bvn += std_normal_cdf(k) - std_normal_cdf(h);
            } else {
                bvn += std_normal_cdf(-h) - std_normal_cdf(-k);
            }
        }
    }
    bvn.clamp(0.0, 1.0)
}

/// Relative slack allowed on |c12| ≤ s1·s2 before the 2×2 matrix is rejected.
pub const PSD_TOL: f64 = 1e-10;

/// cov(1{ξ₁ ≥ T}, 1{ξ₂ ≥ T}) for a bivariate Gaussian with means `m1, m2`,
/// standard deviations `s1, s2` and cross-covariance `c12`.
pub fn indicator_cov(m1: f64, m2: f64, s1: f64, s2: f64, c12: f64, threshold: f64) -> Result<f64> {
    if !(s1 >= 0.0 && s2 >= 0.0) {
        return Err(Error::Parameter(format!(
            "standard deviations must be nonnegative, got {s1} and {s2}"
        )));
    }
    let bound = s1 * s2;
    if c12.abs() > bound * (1.0 + PSD_TOL) + f64::MIN_POSITIVE {
        return Err(Error::Parameter(format!(
            "cross-covariance {c12} exceeds s1*s2 = {bound}"
        )));
    }
    // A constant indicator has zero covariance with anything.
    if s1 == 0.0 || s2 == 0.0 {
        return Ok(0.0);
    }
    let rho = (c12 / bound).clamp(-1.0, 1.0);
    let h = (threshold - m1) / s1;
    let k = (threshold - m2) / s2;
    let joint = bvn_orthant(h, k, rho);
    let p1 = std_normal_sf(h);
    let p2 = std_normal_sf(k);
    Ok(joint - p1 * p2)
}

/// A quadrature rule for expectations under the standard normal density.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Σ wᵢ f(vᵢ).
    pub fn expect(&self, mut f: impl FnMut(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&v, &w)| w * f(v))
            .sum()
    }
}

/// Trapezoid rule for the standard normal weight on [-half_width, half_width]
/// with `n_nodes` equispaced nodes, weights renormalized to sum to one.
/// Slow but robust for integrands with features narrower than the
/// Gauss–Hermite node spacing.
pub fn trapezoid_normal_rule(n_nodes: usize, half_width: f64) -> Result<QuadratureRule> {
    if n_nodes < 2 || !(half_width.is_finite() && half_width > 0.0) {
        return Err(Error::Parameter(format!(
            "trapezoid rule needs at least 2 nodes and a positive half width, got {n_nodes} and {half_width}"
        )));
    }
    let step = 2.0 * half_width / (n_nodes - 1) as f64;
    let nodes: Vec<f64> = (0..n_nodes)
        .map(|i| -half_width + step * i as f64)
        .collect();
    let mut weights: Vec<f64> = nodes
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let end = if i == 0 || i + 1 == n_nodes { 0.5 } else { 1.0 };
            end * std_normal_pdf(v)
        })
        .collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok(QuadratureRule { nodes, weights })
}

pub const MAX_HERMITE_NODES: usize = 101;
pub const DEFAULT_HERMITE_NODES: usize = 25;

/// Gauss–Hermite rule for the standard normal weight, with `n_nodes`
/// nodes in increasing order and weights summing to one.
pub fn gauss_hermite_rule(n_nodes: usize) -> Result<QuadratureRule> {
    if !(1..=MAX_HERMITE_NODES).contains(&n_nodes) {
        return Err(Error::Parameter(format!(
            "Gauss-Hermite rule size must be in 1..={MAX_HERMITE_NODES}, got {n_nodes}"
        )));
    }
    let n = n_nodes;
    let half = n.div_ceil(2);
    let pim4 = PI.powf(-0.25);
    // Roots of the physicists' Hermite polynomial, largest first, by Newton
    // iteration on the orthonormal three-term recurrence.
    let mut roots = vec![0.0f64; half];
    let mut weights = vec![0.0f64; half];
    let nf = n as f64;
    let mut z = 0.0f64;
    for i in 0..half {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.855_75 * (2.0 * nf + 1.0).powf(-0.166_67),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * roots[0],
            3 => 1.91 * z - 0.91 * roots[1],
            _ => 2.0 * z - roots[i - 2],
        };
        let mut pp = 0.0;
        let mut converged = false;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::Numerical(format!(
                "Gauss-Hermite root {i} of {n} did not converge"
            )));
        }
        roots[i] = z;
        weights[i] = 2.0 / (pp * pp);
    }
    if n % 2 == 1 {
        roots[half - 1] = 0.0;
    }
    let mut nodes = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..half {
        nodes[i] = -roots[i] * std::f64::consts::SQRT_2;
        nodes[n - 1 - i] = roots[i] * std::f64::consts::SQRT_2;
        w[i] = weights[i];
        w[n - 1 - i] = weights[i];
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    Ok(QuadratureRule { nodes, weights: w })
}
