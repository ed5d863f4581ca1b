//! Gaussian-process marginal likelihood and hyperparameter tuning.
//!
//! Kernel hyperparameters `(gamma, theta, lambda)` are chosen per treatment
//! arm by maximizing the log marginal likelihood of a zero-mean GP regression
//! of the arm-mean-centered outcomes on the standardized covariates:
//!
//! `log p(y) = -1/2 y' A^{-1} y - 1/2 log det A - m/2 log(2 pi)`,
//!
//! with `A = K + lambda^2 I`. (The GP mean is not specified by the weighting
//! methodology; this implementation centers each arm's outcomes by the arm
//! mean before tuning.) The optimizer is BFGS in log-parameter space with
//! Armijo backtracking, run from a moment-based start plus several random
//! restarts; the best finishing point wins. The tuned noise variance
//! `lambda_t^2` doubles as the conditional-variance plug-in `sigma_i^2 =
//! lambda_{T_i}^2` of the weighting objective.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, StudentizedView};
use crate::error::{Error, Result};
use crate::kernels::{inner_products, kernel_matrix_from_inner, Hyperparams, KernelSpec};

/// Relative jitter ladder (times trace) tried when a covariance fails to
/// factor: start at 1e-10 * trace, escalate tenfold up to 1e-4 * trace.
const JITTER_LEVELS: [f64; 8] = [0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4];

/// Box bound on each log-parameter to keep kernel evaluations finite.
const LOG_BOUND: f64 = 30.0;

/// Half-width of the restart window in log space: restarts multiply each
/// moment-based initial guess by a log-uniform factor in [1e-2, 1e2].
const RESTART_LOG_RANGE: f64 = 4.605170185988091; // ln(100)

/// Options for [`tune`].
#[derive(Debug, Clone)]
pub struct TuneOptions {
    /// Random restarts in addition to the moment-based start.
    pub restarts: usize,
    /// BFGS iteration cap per restart.
    pub max_iter: usize,
    /// Convergence tolerance on the gradient infinity norm (log space).
    pub grad_tol: f64,
    /// Seed for the restart draws.
    pub seed: u64,
}

impl Default for TuneOptions {
    fn default() -> Self {
        TuneOptions {
            restarts: 5,
            max_iter: 200,
            grad_tol: 1e-5,
            seed: 0,
        }
    }
}

/// Tuned hyperparameters for both arms.
#[derive(Debug, Clone)]
pub struct TuneResult {
    /// Hyperparameters for the treated arm's kernel.
    pub params_treated: Hyperparams,
    /// Hyperparameters for the control arm's kernel.
    pub params_control: Hyperparams,
    /// Log marginal likelihood at the treated-arm optimum.
    pub logml_treated: f64,
    /// Log marginal likelihood at the control-arm optimum.
    pub logml_control: f64,
    /// Total BFGS iterations across both arms and all restarts.
    pub iterations: usize,
    /// Whether the winning restart met the gradient tolerance in both arms
    /// (`false` means best-of-restarts at the iteration cap).
    pub converged: bool,
}

impl TuneResult {
    /// Conditional-variance plug-ins `sigma_i^2 = lambda_{T_i}^2`.
    pub fn sigma_sq(&self, t: &[u8]) -> DVector<f64> {
        let s1 = self.params_treated.sigma2();
        let s0 = self.params_control.sigma2();
        DVector::from_fn(t.len(), |i, _| if t[i] == 1 { s1 } else { s0 })
    }

    /// Hyperparameters for the given arm.
    pub fn params(&self, arm: u8) -> &Hyperparams {
        if arm == 1 {
            &self.params_treated
        } else {
            &self.params_control
        }
    }
}

struct LmlEval {
    value: f64,
    grad: [f64; 3],
}

/// Cholesky with an escalating diagonal jitter; on success returns the factor
/// and the jitter used, on failure the largest jitter attempted.
fn cholesky_with_jitter(a: &DMatrix<f64>) -> std::result::Result<(Cholesky<f64, Dyn>, f64), f64> {
    let trace = a.trace();
    let mut last = 0.0;
    for &level in &JITTER_LEVELS {
        let jitter = level * trace;
        last = jitter;
        let mut shifted = a.clone();
        if jitter > 0.0 {
            for i in 0..a.nrows() {
                shifted[(i, i)] += jitter;
            }
        }
        if let Some(c) = shifted.cholesky() {
            return Ok((c, jitter));
        }
    }
    Err(last)
}

fn noisy_gram(
    spec: KernelSpec,
    hp: &Hyperparams,
    s: &DMatrix<f64>,
) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
    let k = kernel_matrix_from_inner(spec, hp, s);
    if k.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let sigma2 = hp.sigma2();
    let mut a = k.clone();
    for i in 0..a.nrows() {
        a[(i, i)] += sigma2;
    }
    Some((k, a))
}

fn lml_value(
    spec: KernelSpec,
    hp: &Hyperparams,
    s: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Option<f64> {
    let m = y.len();
    let (_, a) = noisy_gram(spec, hp, s)?;
    let (chol, _) = cholesky_with_jitter(&a).ok()?;
    let alpha = chol.solve(y);
    let logdet: f64 = chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    let v =
        -0.5 * y.dot(&alpha) - 0.5 * logdet - 0.5 * m as f64 * (2.0 * std::f64::consts::PI).ln();
    v.is_finite().then_some(v)
}

fn lml_grad(
    spec: KernelSpec,
    hp: &Hyperparams,
    s: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Option<LmlEval> {
    let m = y.len();
    let (k, a) = noisy_gram(spec, hp, s)?;
    let (chol, _) = cholesky_with_jitter(&a).ok()?;
    let alpha = chol.solve(y);
    let logdet: f64 = chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    let value =
        -0.5 * y.dot(&alpha) - 0.5 * logdet - 0.5 * m as f64 * (2.0 * std::f64::consts::PI).ln();
    if !value.is_finite() {
        return None;
    }

    // d lml / d phi = 1/2 tr((alpha alpha' - A^{-1}) dA/dphi).
    let a_inv = chol.inverse();
    let mut mmat = &alpha * alpha.transpose();
    mmat -= &a_inv;

    // dA/d log gamma = K (K scales linearly with gamma).
    let d_log_gamma: f64 = 0.5 * mmat.component_mul(&k).sum();

    let gamma = hp.gamma();
    let theta = hp.theta();
    let d_log_theta: f64 = match spec {
        KernelSpec::Linear => {
            // dK/d log theta = gamma * theta * s.
            let mut acc = 0.0;
            for j in 0..m {
                for i in 0..m {
                    acc += mmat[(i, j)] * gamma * theta * s[(i, j)];
                }
            }
            0.5 * acc
        }
        KernelSpec::Polynomial { degree } => {
            let d = degree as i32;
            let mut acc = 0.0;
            for j in 0..m {
                for i in 0..m {
                    let sij = s[(i, j)];
                    let dk = gamma * d as f64 * (1.0 + theta * sij).powi(d - 1) * theta * sij;
                    acc += mmat[(i, j)] * dk;
                }
            }
            0.5 * acc
        }
        KernelSpec::Gaussian => {
            let mut acc = 0.0;
            for j in 0..m {
                for i in 0..m {
                    let d2 = (s[(i, i)] + s[(j, j)] - 2.0 * s[(i, j)]).max(0.0);
                    acc += mmat[(i, j)] * k[(i, j)] * (-theta * d2);
                }
            }
            0.5 * acc
        }
    };

    // dA/d log lambda = 2 lambda^2 I.
    let d_log_lambda = hp.sigma2() * (alpha.norm_squared() - a_inv.trace());

    let grad = [d_log_gamma, d_log_theta, d_log_lambda];
    grad.iter()
        .all(|g| g.is_finite())
        .then_some(LmlEval { value, grad })
}

fn check_lml_inputs(spec: KernelSpec, z: &DMatrix<f64>, y: &DVector<f64>) -> Result<()> {
    spec.validate()?;
    if z.nrows() != y.len() || y.is_empty() {
        return Err(Error::InvalidData(format!(
            "need matching nonempty z ({} rows) and y ({} entries)",
            z.nrows(),
            y.len()
        )));
    }
    Ok(())
}

/// Log marginal likelihood of a zero-mean GP with the given kernel and noise
/// `lambda^2 I` for outcomes `y` at standardized covariates `z` (rows).
///
/// `y` is used as given; callers wanting a nonzero mean must center first.
pub fn log_marginal_likelihood(
    spec: KernelSpec,
    hp: &Hyperparams,
    z: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<f64> {
    check_lml_inputs(spec, z, y)?;
    let s = inner_products(z);
    match lml_value(spec, hp, &s, y) {
        Some(v) => Ok(v),
        None => Err(jitter_error(spec, hp, &s)),
    }
}

/// Log marginal likelihood and its gradient with respect to the log
/// hyperparameters `(log gamma, log theta, log lambda)`.
pub fn log_marginal_likelihood_grad(
    spec: KernelSpec,
    hp: &Hyperparams,
    z: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<(f64, [f64; 3])> {
    check_lml_inputs(spec, z, y)?;
    let s = inner_products(z);
    match lml_grad(spec, hp, &s, y) {
        Some(e) => Ok((e.value, e.grad)),
        None => Err(jitter_error(spec, hp, &s)),
    }
}

/// Distinguishes a factorization failure (reported with the attempted
/// jitter) from a plain overflow to non-finite kernel values.
fn jitter_error(spec: KernelSpec, hp: &Hyperparams, s: &DMatrix<f64>) -> Error {
    match noisy_gram(spec, hp, s) {
        Some((_, a)) => match cholesky_with_jitter(&a) {
            Ok(_) => Error::Numerical("marginal likelihood evaluated to a non-finite value".into()),
            Err(jitter) => Error::NotPsd(format!(
                "GP covariance failed to factor even with jitter {jitter:.3e}"
            )),
        },
        None => Error::Numerical("kernel matrix overflowed to non-finite values".into()),
    }
}

fn clamp_params(p: &mut [f64; 3], log_lambda_floor: f64) {
    for v in p.iter_mut() {
        *v = v.clamp(-LOG_BOUND, LOG_BOUND);
    }
    p[2] = p[2].max(log_lambda_floor);
}

struct BfgsOutcome {
    params: [f64; 3],
    value: f64,
    grad_inf: f64,
    iterations: usize,
}

/// Maximizes the LML from one start by BFGS on the negated objective with
/// Armijo backtracking (value-only trials, gradient at accepted points).
fn bfgs_one_start(
    spec: KernelSpec,
    s: &DMatrix<f64>,
    y: &DVector<f64>,
    start: [f64; 3],
    log_lambda_floor: f64,
    max_iter: usize,
    grad_tol: f64,
) -> Option<BfgsOutcome> {
    let as_hp = |p: &[f64; 3]| Hyperparams {
        log_gamma: p[0],
        log_theta: p[1],
        log_lambda: p[2],
    };

    let mut p = start;
    clamp_params(&mut p, log_lambda_floor);
    let mut cur = lml_grad(spec, &as_hp(&p), s, y)?;
    let mut h = DMatrix::<f64>::identity(3, 3);
    let mut grad_inf = cur.grad.iter().fold(0.0_f64, |m, g| m.max(g.abs()));
    let mut iterations = 0;

    while iterations < max_iter && grad_inf > grad_tol {
        iterations += 1;
        // Minimize -lml: the negated gradient is -cur.grad.
        let neg_g = DVector::from_row_slice(&[-cur.grad[0], -cur.grad[1], -cur.grad[2]]);
        let mut dir = -(&h * &neg_g);
        if dir.dot(&neg_g) >= 0.0 {
            // Not a descent direction for -lml: reset to steepest descent.
            h = DMatrix::identity(3, 3);
            dir = -neg_g.clone();
        }

        let dir_norm = dir.amax();
        let mut step = if dir_norm > 2.0 { 2.0 / dir_norm } else { 1.0 };
        let slope = neg_g.dot(&dir); // negative
        let mut accepted: Option<[f64; 3]> = None;
        for _ in 0..30 {
            let mut cand = [
                p[0] + step * dir[0],
                p[1] + step * dir[1],
                p[2] + step * dir[2],
            ];
            clamp_params(&mut cand, log_lambda_floor);
            if let Some(v) = lml_value(spec, &as_hp(&cand), s, y) {
                if -v <= -cur.value + 1e-4 * step * slope {
                    accepted = Some(cand);
                    break;
                }
            }
            step *= 0.5;
        }
        let Some(p_new) = accepted else {
            break; // line search exhausted: this start is done
        };
        let Some(e_new) = lml_grad(spec, &as_hp(&p_new), s, y) else {
            break;
        };

        let s_vec = DVector::from_row_slice(&[p_new[0] - p[0], p_new[1] - p[1], p_new[2] - p[2]]);
        let y_vec = DVector::from_row_slice(&[
            -(e_new.grad[0] - cur.grad[0]),
            -(e_new.grad[1] - cur.grad[1]),
            -(e_new.grad[2] - cur.grad[2]),
        ]);
        let sy = s_vec.dot(&y_vec);
        if sy > 1e-10 * s_vec.norm() * y_vec.norm() {
            let rho = 1.0 / sy;
            let hy = &h * &y_vec;
            let yhy = y_vec.dot(&hy);
            h += (sy + yhy) * rho * rho * (&s_vec * s_vec.transpose())
                - rho * (&hy * s_vec.transpose() + &s_vec * hy.transpose());
        }

        let step_size = s_vec.amax();
        p = p_new;
        cur = e_new;
        grad_inf = cur.grad.iter().fold(0.0_f64, |m, g| m.max(g.abs()));
        if step_size < 1e-12 {
            break;
        }
    }

    Some(BfgsOutcome {
        params: p,
        value: cur.value,
        grad_inf,
        iterations,
    })
}

struct ArmTune {
    hp: Hyperparams,
    logml: f64,
    iterations: usize,
    converged: bool,
}

fn tune_arm(
    spec: KernelSpec,
    z: &DMatrix<f64>,
    y: &DVector<f64>,
    opts: &TuneOptions,
    arm: u8,
) -> Result<ArmTune> {
    let m = y.len();
    if m < 2 {
        return Err(Error::InvalidData(format!(
            "arm {arm} has {m} outcome-bearing unit(s); hyperparameter tuning needs at least 2"
        )));
    }

    let mean = y.sum() / m as f64;
    let yc = y.map(|v| v - mean);
    let var = (yc.norm_squared() / (m - 1) as f64).max(1e-12);
    let sd = var.sqrt();
    let s = inner_products(z);
    let p_dim = z.ncols().max(1) as f64;

    // Moment-based initial guesses: gamma = var(y), theta = 1/p,
    // lambda^2 = var(y)/2; lambda floored at 1e-6 * sd(y).
    let base = [var.ln(), (1.0 / p_dim).ln(), (0.5 * var).ln() / 2.0];
    let log_lambda_floor = (1e-6 * sd).max(1e-12).ln();

    // Restart seeds differ per arm so the two searches are independent.
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(arm as u64));
    let mut starts = vec![base];
    for _ in 0..opts.restarts {
        starts.push([
            base[0] + rng.gen_range(-RESTART_LOG_RANGE..RESTART_LOG_RANGE),
            base[1] + rng.gen_range(-RESTART_LOG_RANGE..RESTART_LOG_RANGE),
            base[2] + rng.gen_range(-RESTART_LOG_RANGE..RESTART_LOG_RANGE),
        ]);
    }

    let mut best: Option<BfgsOutcome> = None;
    let mut iterations = 0;
    for start in starts {
        if let Some(out) = bfgs_one_start(
            spec,
            &s,
            &yc,
            start,
            log_lambda_floor,
            opts.max_iter,
            opts.grad_tol,
        ) {
            iterations += out.iterations;
            if best.as_ref().is_none_or(|b| out.value > b.value) {
                best = Some(out);
            }
        }
    }

    let best = best.ok_or_else(|| {
        Error::Numerical("marginal likelihood could not be evaluated at any start".into())
    })?;
    Ok(ArmTune {
        hp: Hyperparams {
            log_gamma: best.params[0],
            log_theta: best.params[1],
            log_lambda: best.params[2],
        },
        logml: best.value,
        iterations,
        converged: best.grad_inf <= opts.grad_tol,
    })
}

/// Tunes kernel hyperparameters for both arms by maximizing the GP log
/// marginal likelihood of the arm-mean-centered outcomes on the standardized
/// covariates. Requires outcomes and at least two units per arm.
pub fn tune(
    data: &Dataset,
    view: &StudentizedView,
    spec: KernelSpec,
    opts: &TuneOptions,
) -> Result<TuneResult> {
    spec.validate()?;
    let y = data.outcomes()?;
    if view.z.nrows() != data.n() {
        return Err(Error::InvalidData(
            "studentized view does not match the dataset".into(),
        ));
    }
    let mut arms = Vec::with_capacity(2);
    for arm in [1u8, 0u8] {
        let idx = data.arm_indices(arm);
        let z_arm = DMatrix::from_fn(idx.len(), view.z.ncols(), |i, j| view.z[(idx[i], j)]);
        let y_arm = DVector::from_fn(idx.len(), |i, _| y[idx[i]]);
        arms.push(tune_arm(spec, &z_arm, &y_arm, opts, arm)?);
    }
    let control = arms.pop().expect("two arms");
    let treated = arms.pop().expect("two arms");
    Ok(TuneResult {
        iterations: treated.iterations + control.iterations,
        converged: treated.converged && control.converged,
        logml_treated: treated.logml,
        logml_control: control.logml,
        params_treated: treated.hp,
        params_control: control.hp,
    })
}
