//! Kernel functions and Gram matrices on standardized covariates.
//!
//! Three kernel families are supported, all evaluated on whitened covariates
//! `z` (see [`crate::data::Dataset::studentize`], full mode), so a plain dot
//! product of transformed rows equals the Mahalanobis inner product of the
//! original rows:
//!
//! - linear: `k(z, z') = gamma * (1 + theta * <z, z'>)` (polynomial, d = 1);
//! - polynomial of degree `d`: `k(z, z') = gamma * (1 + theta * <z, z'>)^d`,
//!   whose unit ball contains polynomial functions of total degree up to `d`;
//! - Gaussian: `k(z, z') = gamma * exp(-theta * ||z - z'||^2)`.
//!
//! `gamma > 0` scales the function class, `theta > 0` weights higher-order
//! moments, and `lambda > 0` is the noise standard deviation used by the
//! Gaussian-process tuner and the weighting objective. Hyperparameters are
//! kept in log space, the parameterization the tuner optimizes.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative floor for the smallest eigenvalue of an admissible Gram matrix:
/// `lambda_min >= -PSD_TOL * trace(K)`.
pub const PSD_TOL: f64 = 1e-8;

/// Largest supported polynomial degree.
pub const MAX_DEGREE: u32 = 5;

/// Kernel family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum KernelSpec {
    /// Linear kernel; identical to `Polynomial { degree: 1 }`.
    Linear,
    /// Polynomial kernel of the given total degree (1 through 5).
    Polynomial { degree: u32 },
    /// Gaussian (squared-exponential) kernel.
    Gaussian,
}

impl KernelSpec {
    /// Validates the specification.
    pub fn validate(&self) -> Result<()> {
        match self {
            KernelSpec::Polynomial { degree } if *degree == 0 || *degree > MAX_DEGREE => {
                Err(Error::InvalidArgument(format!(
                    "polynomial kernel degree must be between 1 and {MAX_DEGREE}, got {degree}"
                )))
            }
            _ => Ok(()),
        }
    }

    /// Polynomial degree of the family (`Gaussian` has none).
    pub fn degree(&self) -> Option<u32> {
        match self {
            KernelSpec::Linear => Some(1),
            KernelSpec::Polynomial { degree } => Some(*degree),
            KernelSpec::Gaussian => None,
        }
    }
}

/// Kernel hyperparameters, stored in log space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// log of the output scale `gamma`.
    pub log_gamma: f64,
    /// log of the input scale `theta`.
    pub log_theta: f64,
    /// log of the noise standard deviation `lambda`.
    pub log_lambda: f64,
}

impl Hyperparams {
    /// Builds from natural-scale values, which must be positive and finite.
    pub fn from_values(gamma: f64, theta: f64, lambda: f64) -> Result<Self> {
        for (name, v) in [("gamma", gamma), ("theta", theta), ("lambda", lambda)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "hyperparameter {name} must be positive and finite, got {v}"
                )));
            }
        }
        Ok(Hyperparams {
            log_gamma: gamma.ln(),
            log_theta: theta.ln(),
            log_lambda: lambda.ln(),
        })
    }

    /// Output scale `gamma`.
    pub fn gamma(&self) -> f64 {
        self.log_gamma.exp()
    }

    /// Input scale `theta`.
    pub fn theta(&self) -> f64 {
        self.log_theta.exp()
    }

    /// Noise standard deviation `lambda`.
    pub fn lambda(&self) -> f64 {
        self.log_lambda.exp()
    }

    /// Noise variance `lambda^2`.
    pub fn sigma2(&self) -> f64 {
        let l = self.lambda();
        l * l
    }
}

/// Kernel value from precomputed inner products: `s_ij = <z_i, z_j>` and the
/// diagonal entries `s_ii`, `s_jj` (the diagonal is only used by the Gaussian
/// kernel, through `||z_i - z_j||^2 = s_ii + s_jj - 2 s_ij`).
#[inline]
pub fn kernel_from_products(
    spec: KernelSpec,
    hp: &Hyperparams,
    s_ij: f64,
    s_ii: f64,
    s_jj: f64,
) -> f64 {
    let gamma = hp.gamma();
    let theta = hp.theta();
    match spec {
        KernelSpec::Linear => gamma * (1.0 + theta * s_ij),
        KernelSpec::Polynomial { degree } => gamma * (1.0 + theta * s_ij).powi(degree as i32),
        KernelSpec::Gaussian => {
            let d2 = (s_ii + s_jj - 2.0 * s_ij).max(0.0);
            gamma * (-theta * d2).exp()
        }
    }
}

/// Kernel value for a pair of standardized covariate vectors.
pub fn kernel_eval(spec: KernelSpec, hp: &Hyperparams, a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "kernel arguments must have equal length");
    let s_ab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let s_aa: f64 = a.iter().map(|x| x * x).sum();
    let s_bb: f64 = b.iter().map(|x| x * x).sum();
    kernel_from_products(spec, hp, s_ab, s_aa, s_bb)
}

/// Pairwise inner-product matrix `S = Z Z^T` of the rows of `z`.
pub fn inner_products(z: &DMatrix<f64>) -> DMatrix<f64> {
    z * z.transpose()
}

/// Gram matrix from a precomputed inner-product matrix (unchecked; exactly
/// symmetric by construction).
pub fn kernel_matrix_from_inner(
    spec: KernelSpec,
    hp: &Hyperparams,
    s: &DMatrix<f64>,
) -> DMatrix<f64> {
    let n = s.nrows();
    let mut k = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in j..n {
            let v = kernel_from_products(spec, hp, s[(i, j)], s[(i, i)], s[(j, j)]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Gram matrix of the rows of `z` (unchecked).
pub fn kernel_matrix(spec: KernelSpec, hp: &Hyperparams, z: &DMatrix<f64>) -> DMatrix<f64> {
    kernel_matrix_from_inner(spec, hp, &inner_products(z))
}

/// Builds and validates the Gram matrix of the rows of `z`. A failed PSD
/// check signals a kernel implementation bug, not bad user data.
pub fn gram(spec: KernelSpec, hp: &Hyperparams, z: &DMatrix<f64>) -> Result<GramMatrix> {
    spec.validate()?;
    GramMatrix::new(kernel_matrix(spec, hp, z))
}

/// A validated symmetric positive semi-definite Gram matrix.
///
/// Validation uses a shifted Cholesky factorization: `K + PSD_TOL*trace(K)*I`
/// must factor, which bounds the smallest eigenvalue of `K` from below by
/// `-PSD_TOL * trace(K)` without the cost of a full eigendecomposition.
#[derive(Debug, Clone)]
pub struct GramMatrix(DMatrix<f64>);

impl GramMatrix {
    /// Validates symmetry and (tolerant) positive semi-definiteness.
    pub fn new(k: DMatrix<f64>) -> Result<Self> {
        let n = k.nrows();
        if n == 0 || k.ncols() != n {
            return Err(Error::NotPsd(format!(
                "expected a nonempty square matrix, got {}x{}",
                k.nrows(),
                k.ncols()
            )));
        }
        if k.iter().any(|v| !v.is_finite()) {
            return Err(Error::NotPsd("matrix has non-finite entries".into()));
        }
        let max_abs = k.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let sym_tol = 1e-12_f64.max(1e-12 * max_abs);
        for j in 0..n {
            for i in (j + 1)..n {
                if (k[(i, j)] - k[(j, i)]).abs() > sym_tol {
                    return Err(Error::NotPsd(format!(
                        "asymmetric at ({i},{j}): {} vs {}",
                        k[(i, j)],
                        k[(j, i)]
                    )));
                }
            }
        }
        let trace = k.trace();
        if trace < 0.0 {
            return Err(Error::NotPsd(format!("negative trace {trace}")));
        }
        let shift = PSD_TOL * trace.max(f64::MIN_POSITIVE);
        let mut shifted = k.clone();
        for j in 0..n {
            shifted[(j, j)] += shift;
        }
        if shifted.cholesky().is_none() {
            return Err(Error::NotPsd(format!(
                "smallest eigenvalue below -{PSD_TOL} * trace"
            )));
        }
        Ok(GramMatrix(k))
    }

    /// Wraps a matrix known to be a valid Gram matrix by construction.
    pub fn new_unchecked(k: DMatrix<f64>) -> Self {
        GramMatrix(k)
    }

    /// The underlying matrix.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    /// Consumes the wrapper, returning the matrix.
    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    /// Dimension of the (square) matrix.
    pub fn dim(&self) -> usize {
        self.0.nrows()
    }
}

impl AsRef<DMatrix<f64>> for GramMatrix {
    fn as_ref(&self) -> &DMatrix<f64> {
        &self.0
    }
}
