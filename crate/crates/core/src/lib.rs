//! Stepwise uncertainty reduction (SUR) sequential design for Gaussian
//! processes on finite grids.
//!
//! The crate is organised bottom-up:
//!
//! * [`grid`]: domains, kernels, Gaussian measures and conditioning;
//! * [`special`]: normal distribution kernels, bivariate orthant
//!   probabilities and Gauss–Hermite rules;
//! * [`functionals`]: the uncertainty functionals (IBV, VEV, KG, EI);
//! * [`criteria`]: one-step lookahead criteria and expected gains;
//! * [`strategy`]: the sequential design loop and run traces;
//! * [`diagnostics`]: empirical checks of the supermartingale and
//!   consistency properties;
//! * [`experiment`]: configuration files, replications and outputs used by
//!   the `sur` command-line tool.

pub mod criteria;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod functionals;
pub mod grid;
pub mod rng;
pub mod special;
pub mod strategy;

pub use error::{Error, Result};
