//! Kernel optimal matching: worst-case-MSE-minimizing balancing weights.
//!
//! For weights `w` that are nonnegative and sum to one within each treatment
//! arm, the weighted difference of outcome means estimates the sample average
//! treatment effect with conditional bias controlled by two discrepancy
//! terms, one per arm. When the unknown outcome functions range over the
//! unit ball of the reproducing kernel Hilbert space of a kernel `K`, the
//! worst-case squared bias contribution of arm `a` is
//!
//! `Delta_a^2(w) = (I_a w - e)' K_a (I_a w - e)`,
//!
//! where `I_a` zeroes the other arm's entries and `e` is the vector with all
//! entries `1/n`. Adding the noise variance of the weighted estimator gives
//! the criterion minimized here:
//!
//! `Delta_1^2(w) + Delta_0^2(w) + sum_i w_i^2 sigma_i^2`.
//!
//! This is a convex quadratic in `w` and is solved by [`crate::qp`]. The
//! criterion is an upper bound on the conditional MSE against the sample
//! effect: the full MSE has a further noise term involving the `1/n` sample
//! averages, which does not involve the kernel, is of smaller order, and is
//! omitted from the optimization and from the reported objective.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{Dataset, StudentizedView};
use crate::error::{Error, Result};
use crate::gp::TuneResult;
use crate::kernels::{gram, Hyperparams, KernelSpec};
use crate::qp::{self, QpProblem, QpSolution};

/// Negative values of a discrepancy beyond this magnitude indicate a
/// non-PSD kernel matrix rather than rounding.
const NEG_CLIP: f64 = -1e-10;

/// Worst-case squared discrepancy of arm `arm`:
/// `(I_a w - e)' K (I_a w - e)` with `e = (1/n, ..., 1/n)`.
///
/// `k` must be the full `n x n` kernel matrix over all units. Tiny negative
/// values from rounding are clipped to zero; distinctly negative values are
/// an internal-consistency error.
pub fn worst_case_discrepancy_sq(
    k: &DMatrix<f64>,
    w: &DVector<f64>,
    t: &[u8],
    arm: u8,
) -> Result<f64> {
    let n = t.len();
    if k.nrows() != n || k.ncols() != n || w.len() != n || n == 0 {
        return Err(Error::InvalidArgument(format!(
            "inconsistent shapes: kernel {}x{}, {} weights, {} treatments",
            k.nrows(),
            k.ncols(),
            w.len(),
            n
        )));
    }
    let e = 1.0 / n as f64;
    let v = DVector::from_fn(n, |i, _| if t[i] == arm { w[i] - e } else { -e });
    let value = v.dot(&(k * &v));
    if value < NEG_CLIP {
        return Err(Error::NotPsd(format!(
            "discrepancy evaluated to {value:.3e}; kernel matrix is not positive semidefinite"
        )));
    }
    Ok(value.max(0.0))
}

/// The assembled QP together with the weight-independent constant that the
/// solver drops from the criterion.
#[derive(Debug, Clone)]
pub struct KomAssembly {
    /// `min w'Qw - 2c'w` over the per-arm simplices.
    pub qp: QpProblem,
    /// `e'K_1 e + e'K_0 e`, added back when reporting the criterion value.
    pub constant: f64,
}

/// Assembles the weighting criterion into a [`QpProblem`] with arm totals 1:
/// `Q = I_1 K_1 I_1 + I_0 K_0 I_0 + diag(sigma^2)` and
/// `c = I_1 K_1 e + I_0 K_0 e`.
pub fn assemble(
    k1: &DMatrix<f64>,
    k0: &DMatrix<f64>,
    t: &[u8],
    sigma_sq: &DVector<f64>,
) -> Result<KomAssembly> {
    let n = t.len();
    if k1.nrows() != n || k1.ncols() != n || k0.nrows() != n || k0.ncols() != n {
        return Err(Error::InvalidArgument(format!(
            "kernel matrices must be {n}x{n} to match {n} treatments"
        )));
    }
    if sigma_sq.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{} noise variances for {} units",
            sigma_sq.len(),
            n
        )));
    }
    if sigma_sq.iter().any(|&v| !v.is_finite() || v < 0.0) {
        return Err(Error::InvalidArgument(
            "noise variances must be finite and nonnegative".into(),
        ));
    }

    let e = 1.0 / n as f64;
    let mut q = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in 0..n {
            let same_arm = t[i] == t[j];
            if same_arm {
                q[(i, j)] = if t[i] == 1 { k1[(i, j)] } else { k0[(i, j)] };
            }
        }
    }
    for i in 0..n {
        q[(i, i)] += sigma_sq[i];
    }
    let c = DVector::from_fn(n, |i, _| {
        let k = if t[i] == 1 { k1 } else { k0 };
        let mut row = 0.0;
        for j in 0..n {
            row += k[(i, j)];
        }
        e * row
    });
    let constant = e * e * (k1.sum() + k0.sum());
    Ok(KomAssembly {
        qp: QpProblem::new(q, c, t.to_vec(), 1.0)?,
        constant,
    })
}

/// How the per-unit noise variances entering the criterion are chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SigmaSpec {
    /// `sigma_i^2 = lambda_{T_i}^2` from the arm's kernel hyperparameters.
    FromParams,
    /// A single variance shared by all units.
    Homoskedastic(f64),
}

/// Configuration for [`kom_weights`].
#[derive(Debug, Clone)]
pub struct KomConfig {
    /// Kernel family (shared by both arms).
    pub spec: KernelSpec,
    /// Hyperparameters of the treated arm's kernel.
    pub params_treated: Hyperparams,
    /// Hyperparameters of the control arm's kernel.
    pub params_control: Hyperparams,
    /// Noise-variance choice.
    pub sigma: SigmaSpec,
    /// Solver tolerance.
    pub tol: f64,
    /// Solver iteration cap.
    pub max_iter: usize,
}

impl KomConfig {
    /// Configuration from tuned hyperparameters, with `sigma_i^2` taken from
    /// the tuned noise scales.
    pub fn from_tune(spec: KernelSpec, tune: &TuneResult) -> Self {
        KomConfig {
            spec,
            params_treated: tune.params_treated,
            params_control: tune.params_control,
            sigma: SigmaSpec::FromParams,
            tol: qp::DEFAULT_TOL,
            max_iter: qp::DEFAULT_MAX_ITER,
        }
    }

    /// Configuration with identical hyperparameters in both arms and a fixed
    /// shared noise variance.
    pub fn homoskedastic(spec: KernelSpec, params: Hyperparams, sigma_sq: f64) -> Self {
        KomConfig {
            spec,
            params_treated: params,
            params_control: params,
            sigma: SigmaSpec::Homoskedastic(sigma_sq),
            tol: qp::DEFAULT_TOL,
            max_iter: qp::DEFAULT_MAX_ITER,
        }
    }
}

/// Convergence diagnostics carried over from the QP solver.
#[derive(Debug, Clone)]
pub struct SolverInfo {
    /// Final projected-gradient residual.
    pub kkt_residual: f64,
    /// Iterations taken.
    pub iterations: usize,
    /// Whether the solver met its tolerance before the cap.
    pub converged: bool,
    /// Diagonal repair applied to the quadratic term, if any.
    pub psd_shift: f64,
}

impl From<&QpSolution> for SolverInfo {
    fn from(s: &QpSolution) -> Self {
        SolverInfo {
            kkt_residual: s.kkt_residual,
            iterations: s.iterations,
            converged: s.converged,
            psd_shift: s.psd_shift,
        }
    }
}

/// Weights minimizing the worst-case criterion, with its decomposition.
#[derive(Debug, Clone)]
pub struct WeightSolution {
    /// Weights: nonnegative, each arm summing to one.
    pub w: DVector<f64>,
    /// Worst-case squared discrepancy of the treated arm, recomputed from
    /// `w` and the kernel matrix (not read off the solver).
    pub delta1_sq: f64,
    /// Worst-case squared discrepancy of the control arm.
    pub delta0_sq: f64,
    /// Noise term `sum_i w_i^2 sigma_i^2`.
    pub variance_term: f64,
    /// Criterion value: the solver's objective plus the dropped constant.
    /// Agrees with `delta1_sq + delta0_sq + variance_term` up to rounding.
    pub objective: f64,
    /// Raw solver objective `w'Qw - 2c'w` (without the constant).
    pub solver_objective: f64,
    /// The weight-independent constant `e'K_1 e + e'K_0 e`.
    pub constant: f64,
    /// Solver diagnostics.
    pub solver_info: SolverInfo,
    /// Non-fatal conditions observed while solving.
    pub warnings: Vec<String>,
}

/// Computes kernel optimal matching weights for a dataset.
///
/// Builds one kernel matrix per arm over all `n` standardized units,
/// assembles the criterion, and solves the simplex-constrained QP. Outcomes
/// are not needed. An arm with a single unit is allowed (its weight is
/// forced to one) and reported as a warning.
pub fn kom_weights(
    data: &Dataset,
    view: &StudentizedView,
    config: &KomConfig,
) -> Result<WeightSolution> {
    if view.z.nrows() != data.n() {
        return Err(Error::InvalidData(
            "studentized view does not match the dataset".into(),
        ));
    }
    config.spec.validate()?;
    if let SigmaSpec::Homoskedastic(v) = config.sigma {
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "homoskedastic noise variance must be nonnegative, got {v}"
            )));
        }
    }

    let k1 = gram(config.spec, &config.params_treated, &view.z)?.into_matrix();
    let k0 = gram(config.spec, &config.params_control, &view.z)?.into_matrix();
    let sigma_sq = match config.sigma {
        SigmaSpec::FromParams => {
            let s1 = config.params_treated.sigma2();
            let s0 = config.params_control.sigma2();
            DVector::from_fn(data.n(), |i, _| if data.t[i] == 1 { s1 } else { s0 })
        }
        SigmaSpec::Homoskedastic(v) => DVector::from_element(data.n(), v),
    };

    let mut warnings = Vec::new();
    for arm in [1u8, 0u8] {
        let m = data.arm_indices(arm).len();
        if m == 1 {
            warnings.push(format!(
                "arm {arm} has a single unit; its weight is forced to one"
            ));
        }
    }

    let assembly = assemble(&k1, &k0, &data.t, &sigma_sq)?;
    let sol = qp::solve(&assembly.qp, config.tol, config.max_iter)?;
    if !sol.converged {
        warnings.push(format!(
            "solver stopped at the iteration cap with residual {:.3e}",
            sol.kkt_residual
        ));
    }

    let delta1_sq = worst_case_discrepancy_sq(&k1, &sol.w, &data.t, 1)?;
    let delta0_sq = worst_case_discrepancy_sq(&k0, &sol.w, &data.t, 0)?;
    let variance_term = sol
        .w
        .iter()
        .zip(sigma_sq.iter())
        .map(|(&wi, &si)| wi * wi * si)
        .sum();

    Ok(WeightSolution {
        objective: sol.objective + assembly.constant,
        solver_objective: sol.objective,
        constant: assembly.constant,
        delta1_sq,
        delta0_sq,
        variance_term,
        solver_info: SolverInfo::from(&sol),
        w: sol.w,
        warnings,
    })
}

/// Conditional-bias identity of the weighted estimator, checked both by the
/// closed-form expression and by simulating outcome noise.
#[derive(Debug, Clone)]
pub struct BiasIdentity {
    /// `sum_i (I_1 w - e)_i f1_i - sum_i (I_0 w - e)_i f0_i`.
    pub formula_bias: f64,
    /// Monte Carlo average of `tau_hat - sample effect` over noise draws.
    pub mc_bias: f64,
    /// Standard error of the Monte Carlo average.
    pub mc_se: f64,
}

/// Verifies that the conditional bias of the weighted estimator equals the
/// two-discrepancy expression. Potential outcomes are `f1 + eps` and
/// `f0 + eps` with shared per-unit noise, so the sample effect is exactly
/// `mean(f1 - f0)` and the formula is an identity in expectation.
pub fn bias_identity_check(
    w: &DVector<f64>,
    f1: &DVector<f64>,
    f0: &DVector<f64>,
    t: &[u8],
    noise_sd: f64,
    draws: usize,
    seed: u64,
) -> Result<BiasIdentity> {
    let n = t.len();
    if w.len() != n || f1.len() != n || f0.len() != n || n == 0 {
        return Err(Error::InvalidArgument(
            "weights, outcome functions, and treatments must share one length".into(),
        ));
    }
    if draws == 0 || !(noise_sd.is_finite() && noise_sd >= 0.0) {
        return Err(Error::InvalidArgument(
            "need a positive draw count and nonnegative noise scale".into(),
        ));
    }

    let e = 1.0 / n as f64;
    let mut formula = 0.0;
    for i in 0..n {
        let w1 = if t[i] == 1 { w[i] } else { 0.0 };
        let w0 = if t[i] == 1 { 0.0 } else { w[i] };
        formula += (w1 - e) * f1[i] - (w0 - e) * f0[i];
    }

    // tau_hat - sample effect = formula + sum_i c_i eps_i with
    // c_i = w_i (treated) or -w_i (control); the shared noise cancels in
    // the sample effect.
    let sample_effect = (0..n).map(|i| (f1[i] - f0[i]) * e).sum::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..draws {
        let mut tau_hat = 0.0;
        for i in 0..n {
            let eps: f64 = rng.sample::<f64, _>(StandardNormal) * noise_sd;
            let y = if t[i] == 1 { f1[i] + eps } else { f0[i] + eps };
            tau_hat += if t[i] == 1 { w[i] * y } else { -w[i] * y };
        }
        let err = tau_hat - sample_effect;
        sum += err;
        sum_sq += err * err;
    }
    let mc_bias = sum / draws as f64;
    let var = (sum_sq - sum * sum / draws as f64) / (draws.saturating_sub(1).max(1)) as f64;
    let mc_se = (var.max(0.0) / draws as f64).sqrt();

    Ok(BiasIdentity {
        formula_bias: formula,
        mc_bias,
        mc_se,
    })
}
