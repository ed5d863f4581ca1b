//! Kernel optimal matching for observational causal inference.
//!
//! This crate computes balancing weights for estimating the sample average
//! treatment effect (SATE) from observational data. The weights minimize the
//! worst-case conditional mean squared error of a weighted difference-in-means
//! estimator, where the worst case is taken over outcome functions in the unit
//! ball of a reproducing kernel Hilbert space. The minimization is a convex
//! quadratic program over a pair of simplex constraints (one per treatment
//! arm), solved by an accelerated projected-gradient method.
//!
//! Kernel hyperparameters are tuned by maximizing the marginal likelihood of a
//! Gaussian-process regression of observed outcomes on covariates, separately
//! within each treatment arm. The tuned noise variances also supply the
//! heteroskedasticity term of the objective.
//!
//! Modules:
//! - [`data`]: dataset container, CSV loading, studentization.
//! - [`kernels`]: polynomial Mahalanobis and Gaussian kernels, Gram matrices.
//! - [`gp`]: Gaussian-process marginal likelihood and hyperparameter tuning.
//! - [`qp`]: projected-gradient solver for simplex-constrained QPs.
//! - [`kom`]: assembly of the weighting problem and its solution.
//! - [`design`]: monomial design matrices for parametric baselines.
//! - [`estimators`]: effect estimation (weighted least squares with sandwich
//!   standard errors) and baseline weighting methods (inverse propensity,
//!   truncated inverse propensity, regression adjustment, stable balancing).
//! - [`sim`]: data-generating processes and simulation studies.

pub mod data;
pub mod design;
pub mod error;
pub mod estimators;
pub mod gp;
pub mod kernels;
pub mod kom;
pub mod qp;
pub mod sim;

pub use error::{Error, Result};

// Re-exported so downstream crates use the same linear-algebra and RNG types.
pub use nalgebra;
pub use rand;
pub use rand_chacha;
