//! Effect estimation and baseline weighting methods.
//!
//! Estimation: [`wls_sate`] regresses the outcome on the treatment by
//! weighted least squares, which reduces to the difference of weighted
//! outcome means between arms. Its standard error is the HC0 sandwich,
//! treating the weights as fixed; the confidence interval is the Wald
//! interval at the 95% level.
//!
//! Baselines: logistic-regression propensity scores with inverse-probability
//! weights ([`iptw_weights`]), percentile truncation of a weight vector
//! ([`truncate_weights`]), regression adjustment with a bootstrap standard
//! error ([`regression_adjustment`]), and stable balancing weights of
//! minimal concentration under approximate moment balance ([`sbw_weights`]).
//! All parametric designs are monomials (see [`crate::design`]) of the
//! per-covariate standardized view of the data.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Standardize};
use crate::design::{design_matrix, monomial_exponents};
use crate::error::{Error, Result};
use crate::qp::{self, EngineOptions};

/// Two-sided 95% normal critical value used for all Wald intervals.
pub const Z_CRIT: f64 = 1.959964;

/// Fitted probabilities are clipped to `[CLIP, 1 - CLIP]`.
const PROB_CLIP: f64 = 1e-6;

/// Default truncation percentiles for inverse-probability weights.
pub const DEFAULT_TRUNCATION: (f64, f64) = (1.0, 99.0);

/// Default balance-tolerance ladder for stable balancing weights, in
/// standard-deviation units of each moment.
pub const SBW_TOL_GRID: [f64; 3] = [0.01, 0.1, 1.0];

/// A point estimate with its standard error and 95% Wald interval.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectEstimate {
    /// Estimated sample average treatment effect.
    pub tau_hat: f64,
    /// Standard error.
    pub se: f64,
    /// `tau_hat -/+ 1.959964 * se`.
    pub ci: (f64, f64),
}

impl EffectEstimate {
    fn from_tau_se(tau_hat: f64, se: f64) -> Self {
        EffectEstimate {
            tau_hat,
            se,
            ci: (tau_hat - Z_CRIT * se, tau_hat + Z_CRIT * se),
        }
    }

    /// Whether the interval covers `truth`.
    pub fn covers(&self, truth: f64) -> bool {
        self.ci.0 <= truth && truth <= self.ci.1
    }
}

/// Weighted-least-squares estimate of the average effect: the outcome is
/// regressed on an intercept and the treatment indicator with weights `w`,
/// so the effect coefficient is the difference of weighted means,
///
/// `tau_hat = sum_T w y / S_1 - sum_C w y / S_0`, `S_a = sum_arm w`.
///
/// The variance is the HC0 sandwich for that regression with the weights
/// treated as fixed: `V = B_1 / S_1^2 + B_0 / S_0^2` with
/// `B_a = sum_arm w_i^2 e_i^2` and residuals `e` against the arm means.
/// The estimate is invariant to rescaling the weights within either arm.
pub fn wls_sate(data: &Dataset, w: &DVector<f64>) -> Result<EffectEstimate> {
    let y = data.outcomes()?;
    let n = data.n();
    if w.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{} weights for {} units",
            w.len(),
            n
        )));
    }
    if w.iter().any(|&v| !v.is_finite() || v < 0.0) {
        return Err(Error::InvalidArgument(
            "weights must be finite and nonnegative".into(),
        ));
    }

    let mut s = [0.0_f64; 2];
    let mut wy = [0.0_f64; 2];
    for i in 0..n {
        let a = data.t[i] as usize;
        s[a] += w[i];
        wy[a] += w[i] * y[i];
    }
    for arm in [1usize, 0] {
        if s[arm] <= 0.0 {
            return Err(Error::InvalidData(format!(
                "arm {arm} has zero total weight; the weighted mean is undefined"
            )));
        }
    }
    let mean1 = wy[1] / s[1];
    let mean0 = wy[0] / s[0];
    let tau_hat = mean1 - mean0;

    let mut b = [0.0_f64; 2];
    for i in 0..n {
        let a = data.t[i] as usize;
        let resid = y[i] - if a == 1 { mean1 } else { mean0 };
        b[a] += w[i] * w[i] * resid * resid;
    }
    let var = b[1] / (s[1] * s[1]) + b[0] / (s[0] * s[0]);
    Ok(EffectEstimate::from_tau_se(tau_hat, var.max(0.0).sqrt()))
}

/// A fitted logistic propensity model on a monomial design of the
/// per-covariate standardized covariates.
#[derive(Debug, Clone)]
pub struct PropensityModel {
    /// Monomial degree of the design.
    pub degree: u32,
    /// Coefficients, one per design column (intercept first).
    pub coef: DVector<f64>,
    /// Covariate means used for standardization.
    pub mu: DVector<f64>,
    /// Reciprocal scales used for standardization (1 for constant columns).
    pub inv_scale: DVector<f64>,
    /// Fitted probabilities on the training units, clipped.
    pub fitted: DVector<f64>,
    /// Whether the iteration met its tolerance.
    pub converged: bool,
    /// Whether the fit shows signs of separation (near-deterministic
    /// assignment); reported, not fatal.
    pub separated: bool,
    /// Iterations used.
    pub iterations: usize,
}

impl PropensityModel {
    /// Predicted probabilities for new covariate rows on the original scale,
    /// clipped to `[1e-6, 1 - 1e-6]`.
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        if x.ncols() != self.mu.len() {
            return Err(Error::InvalidArgument(format!(
                "model was fit on {} covariates, got {}",
                self.mu.len(),
                x.ncols()
            )));
        }
        let z = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
            (x[(i, j)] - self.mu[j]) * self.inv_scale[j]
        });
        let phi = design_matrix(&z, self.degree)?;
        let eta = phi * &self.coef;
        Ok(eta.map(sigmoid_clipped))
    }
}

fn sigmoid_clipped(eta: f64) -> f64 {
    let p = 1.0 / (1.0 + (-eta).exp());
    p.clamp(PROB_CLIP, 1.0 - PROB_CLIP)
}

/// Fits the propensity model `P(T = 1 | x)` by iteratively reweighted least
/// squares with a small ridge for stability. Stops when no coefficient moves
/// by more than 1e-8, or after 100 iterations (flagged, not fatal).
pub fn fit_propensity(data: &Dataset, degree: u32) -> Result<PropensityModel> {
    let view = data.studentize(Standardize::Diagonal)?;
    let inv_scale = DVector::from_fn(data.p(), |j, _| {
        let s = view.sigma_hat[(j, j)].sqrt();
        if s > 0.0 {
            1.0 / s
        } else {
            1.0
        }
    });
    let phi = design_matrix(&view.z, degree)?;
    let n = data.n();
    let k = phi.ncols();
    let t = DVector::from_fn(n, |i, _| data.t[i] as f64);

    let mut beta = DVector::zeros(k);
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..100 {
        iterations += 1;
        let eta = &phi * &beta;
        let p = eta.map(sigmoid_clipped);
        // Newton step through weighted normal equations:
        // (Phi' W Phi + ridge I) d = Phi' (t - p).
        let wvec = p.map(|pi| pi * (1.0 - pi));
        let mut xtwx = DMatrix::zeros(k, k);
        for i in 0..n {
            let wi = wvec[i];
            for a in 0..k {
                let fa = phi[(i, a)] * wi;
                for bcol in a..k {
                    xtwx[(a, bcol)] += fa * phi[(i, bcol)];
                }
            }
        }
        for a in 0..k {
            for bcol in 0..a {
                xtwx[(a, bcol)] = xtwx[(bcol, a)];
            }
        }
        let score = phi.transpose() * (&t - &p);
        let mut ridge = 1e-8 * (1.0 + xtwx.trace() / k as f64);
        let step = loop {
            let mut h = xtwx.clone();
            for a in 0..k {
                h[(a, a)] += ridge;
            }
            match h.cholesky() {
                Some(chol) => break chol.solve(&score),
                None if ridge < 1e-2 => ridge *= 100.0,
                None => {
                    return Err(Error::Numerical(
                        "propensity Hessian could not be factored".into(),
                    ))
                }
            }
        };
        beta += &step;
        if step.amax() < 1e-8 {
            converged = true;
            break;
        }
    }

    let eta = &phi * &beta;
    let fitted = eta.map(sigmoid_clipped);
    let separated = !converged || eta.amax() > 15.0;
    Ok(PropensityModel {
        degree,
        coef: beta,
        mu: view.mu_hat.clone(),
        inv_scale,
        fitted,
        converged,
        separated,
        iterations,
    })
}

/// Inverse-probability weights `T_i / e_i + (1 - T_i) / (1 - e_i)` from a
/// degree-`degree` logistic propensity fit. The weights are not normalized;
/// [`wls_sate`] normalizes per arm internally.
pub fn iptw_weights(data: &Dataset, degree: u32) -> Result<(DVector<f64>, PropensityModel)> {
    let model = fit_propensity(data, degree)?;
    let w = DVector::from_fn(data.n(), |i, _| {
        let e = model.fitted[i];
        if data.t[i] == 1 {
            1.0 / e
        } else {
            1.0 / (1.0 - e)
        }
    });
    Ok((w, model))
}

/// Linear-interpolation percentile (quantile type 7) of `sorted` values.
fn percentile_sorted(sorted: &[f64], pct: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * pct / 100.0;
    let lo = h.floor() as usize;
    let hi = lo + 1;
    if hi >= n {
        return sorted[n - 1];
    }
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Truncates a weight vector at the given percentiles of its own pooled
/// distribution (both arms together): values below the lower percentile are
/// raised to it and values above the upper percentile lowered to it.
/// `(0, 100)` leaves every weight unchanged. The transform is monotone, so
/// the ordering of the weights is preserved.
pub fn truncate_weights(w: &DVector<f64>, lower_pct: f64, upper_pct: f64) -> Result<DVector<f64>> {
    if w.is_empty() {
        return Err(Error::InvalidArgument("no weights to truncate".into()));
    }
    if !(0.0..=100.0).contains(&lower_pct)
        || !(0.0..=100.0).contains(&upper_pct)
        || lower_pct >= upper_pct
    {
        return Err(Error::InvalidArgument(format!(
            "truncation percentiles must satisfy 0 <= lower < upper <= 100, got ({lower_pct}, {upper_pct})"
        )));
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite weight".into()));
    }
    let mut sorted: Vec<f64> = w.iter().copied().collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let lo = percentile_sorted(&sorted, lower_pct);
    let hi = percentile_sorted(&sorted, upper_pct);
    Ok(w.map(|v| v.clamp(lo, hi)))
}

fn ols_fit(phi: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let svd = phi.clone().svd(true, true);
    svd.solve(y, 1e-10)
        .map_err(|e| Error::Numerical(format!("least squares failed: {e}")))
}

/// Regression adjustment: fits one monomial outcome model per arm, predicts
/// both potential outcomes for every unit, and averages the contrast,
///
/// `tau_hat = mean_i (f1_hat(z_i) - f0_hat(z_i))`.
///
/// The standard error is a nonparametric bootstrap (resampling units within
/// each arm, `draws` times, deterministic in `seed`).
pub fn regression_adjustment(
    data: &Dataset,
    degree: u32,
    draws: usize,
    seed: u64,
) -> Result<EffectEstimate> {
    if draws < 2 {
        return Err(Error::InvalidArgument(
            "bootstrap needs at least two draws".into(),
        ));
    }
    let y = data.outcomes()?;
    let view = data.studentize(Standardize::Diagonal)?;
    let phi = design_matrix(&view.z, degree)?;

    let point = ra_point(&phi, y, &data.t, None)?;

    let idx1 = data.arm_indices(1);
    let idx0 = data.arm_indices(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut taus = Vec::with_capacity(draws);
    for _ in 0..draws {
        // Stratified resample: each arm keeps its size.
        let mut rows = Vec::with_capacity(data.n());
        for _ in 0..idx1.len() {
            rows.push(idx1[rng.gen_range(0..idx1.len())]);
        }
        for _ in 0..idx0.len() {
            rows.push(idx0[rng.gen_range(0..idx0.len())]);
        }
        if let Ok(tau) = ra_point(&phi, y, &data.t, Some(&rows)) {
            taus.push(tau); // a degenerate resample is skipped
        }
    }
    if taus.len() < 2 {
        return Err(Error::Numerical(
            "bootstrap produced fewer than two usable draws".into(),
        ));
    }
    let m = taus.len() as f64;
    let mean = taus.iter().sum::<f64>() / m;
    let var = taus.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / (m - 1.0);
    Ok(EffectEstimate::from_tau_se(point, var.sqrt()))
}

/// One regression-adjustment point estimate, optionally on a row resample.
fn ra_point(phi: &DMatrix<f64>, y: &DVector<f64>, t: &[u8], rows: Option<&[usize]>) -> Result<f64> {
    let all: Vec<usize>;
    let rows = match rows {
        Some(r) => r,
        None => {
            all = (0..t.len()).collect();
            &all
        }
    };
    let k = phi.ncols();
    let mut beta = [DVector::zeros(k), DVector::zeros(k)];
    for arm in [1usize, 0] {
        let sel: Vec<usize> = rows
            .iter()
            .copied()
            .filter(|&i| t[i] == arm as u8)
            .collect();
        if sel.is_empty() {
            return Err(Error::InvalidData(format!("arm {arm} is empty")));
        }
        let phi_a = DMatrix::from_fn(sel.len(), k, |i, j| phi[(sel[i], j)]);
        let y_a = DVector::from_fn(sel.len(), |i, _| y[sel[i]]);
        beta[arm] = ols_fit(&phi_a, &y_a)?;
    }
    // Contrast averaged over the (re)sampled units.
    let diff = &beta[1] - &beta[0];
    let mut sum = 0.0;
    for &i in rows {
        let mut dot = 0.0;
        for j in 0..k {
            dot += phi[(i, j)] * diff[j];
        }
        sum += dot;
    }
    Ok(sum / rows.len() as f64)
}

/// Stable balancing weights and the balance level at which they were found.
#[derive(Debug, Clone)]
pub struct SbwResult {
    /// Weights for all units; each arm is nonnegative and sums to one.
    pub w: DVector<f64>,
    /// Balance tolerance used for the treated arm (SD units per moment).
    pub tol_treated: f64,
    /// Balance tolerance used for the control arm.
    pub tol_control: f64,
    /// Largest absolute standardized moment imbalance in the treated arm,
    /// measured beyond the tolerance (zero when fully within it).
    pub max_violation_treated: f64,
    /// Same for the control arm.
    pub max_violation_control: f64,
}

/// Stable balancing weights: per arm, the weights of minimal sum of squares
/// subject to the simplex constraints and approximate moment balance,
///
/// `min sum w_i^2  s.t.  |sum_arm w_i g_j(z_i) - mean_n g_j| <= tol`,
///
/// where the `g_j` are the non-constant monomials of the standardized
/// covariates up to `degree`, each scaled to unit standard deviation so the
/// tolerance is in SD units. Tolerances are tried in `tol_grid` order per
/// arm, escalating when infeasible; if every level fails, the error names
/// the most violated moment.
pub fn sbw_weights(data: &Dataset, degree: u32, tol_grid: &[f64]) -> Result<SbwResult> {
    if tol_grid.is_empty() || tol_grid.iter().any(|&t| !(t.is_finite() && t > 0.0)) {
        return Err(Error::InvalidArgument(
            "the balance-tolerance grid must be positive and nonempty".into(),
        ));
    }
    if degree == 0 {
        return Err(Error::InvalidArgument(
            "balancing needs at least degree-1 moments".into(),
        ));
    }
    let view = data.studentize(Standardize::Diagonal)?;
    let phi = design_matrix(&view.z, degree)?;
    let n = data.n();
    let k = phi.ncols() - 1; // drop the intercept

    // Standardize each moment to full-sample mean 0 and SD 1; a constant
    // moment is dropped to zero (it is balanced by construction).
    let mut g = DMatrix::zeros(n, k);
    for j in 0..k {
        let col = phi.column(j + 1);
        let mean = col.sum() / n as f64;
        let var =
            col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0).max(1.0);
        let sd = var.sqrt();
        let inv = if sd > 1e-12 { 1.0 / sd } else { 0.0 };
        for i in 0..n {
            g[(i, j)] = (phi[(i, j + 1)] - mean) * inv;
        }
    }
    let names: Vec<String> = monomial_exponents(data.p(), degree)[1..]
        .iter()
        .map(|e| moment_name(e))
        .collect();

    let mut w = DVector::zeros(n);
    let mut tols = [0.0_f64; 2];
    let mut viols = [0.0_f64; 2];
    for arm in [1u8, 0u8] {
        let idx = data.arm_indices(arm);
        let g_arm = DMatrix::from_fn(idx.len(), k, |i, j| g[(idx[i], j)]);
        let (w_arm, tol_used, viol) = sbw_one_arm(&g_arm, tol_grid, arm, &names)?;
        for (row, &i) in idx.iter().enumerate() {
            w[i] = w_arm[row];
        }
        tols[arm as usize] = tol_used;
        viols[arm as usize] = viol;
    }
    Ok(SbwResult {
        w,
        tol_treated: tols[1],
        tol_control: tols[0],
        max_violation_treated: viols[1],
        max_violation_control: viols[0],
    })
}

/// Names a standardized moment for error messages, e.g. `z1` or `z1^2*z2`.
fn moment_name(exp: &[u32]) -> String {
    let mut parts = Vec::new();
    for (j, &e) in exp.iter().enumerate() {
        match e {
            0 => {}
            1 => parts.push(format!("z{}", j + 1)),
            _ => parts.push(format!("z{}^{e}", j + 1)),
        }
    }
    if parts.is_empty() {
        "1".into()
    } else {
        parts.join("*")
    }
}

/// Augmented-Lagrangian solve of one arm's balancing problem at escalating
/// tolerances. Returns the weights, the tolerance used, and the final
/// residual violation beyond the tolerance.
fn sbw_one_arm(
    g_arm: &DMatrix<f64>,
    tol_grid: &[f64],
    arm: u8,
    names: &[String],
) -> Result<(DVector<f64>, f64, f64)> {
    let m = g_arm.nrows();
    let k = g_arm.ncols();
    if m == 0 {
        return Err(Error::InvalidData(format!("arm {arm} is empty")));
    }
    let uniform = DVector::from_element(m, 1.0 / m as f64);
    if k == 0 {
        return Ok((uniform, tol_grid[0], 0.0));
    }
    let gram = g_arm.transpose() * g_arm;
    let gram_top = qp::largest_eigenvalue_symmetric(&gram).max(0.0);

    let mut last_violation = f64::INFINITY;
    let mut worst_moment = 0usize;
    for &tol in tol_grid {
        // Multipliers for the upper (v <= tol) and lower (-v <= tol) sides.
        let mut mu = DVector::<f64>::zeros(k);
        let mut nu = DVector::<f64>::zeros(k);
        let mut rho = 10.0_f64;
        let mut x = uniform.clone();
        let mut best: Option<(DVector<f64>, f64)> = None;
        let mut prev_viol = f64::INFINITY;

        for _outer in 0..40 {
            let f = |w: &DVector<f64>| {
                let v = g_arm.transpose() * w;
                let mut val = w.norm_squared();
                for j in 0..k {
                    let up = (mu[j] + rho * (v[j] - tol)).max(0.0);
                    let dn = (nu[j] + rho * (-v[j] - tol)).max(0.0);
                    val += (up * up - mu[j] * mu[j] + dn * dn - nu[j] * nu[j]) / (2.0 * rho);
                }
                val
            };
            let grad = |w: &DVector<f64>| {
                let v = g_arm.transpose() * w;
                let mut active = DVector::zeros(k);
                for j in 0..k {
                    let up = (mu[j] + rho * (v[j] - tol)).max(0.0);
                    let dn = (nu[j] + rho * (-v[j] - tol)).max(0.0);
                    active[j] = up - dn;
                }
                2.0 * w + g_arm * active
            };
            let project = |w: &DVector<f64>| qp::project_simplex(w, 1.0).expect("nonempty arm");
            let lipschitz = 2.0 + rho * gram_top;
            let opts = EngineOptions {
                max_iter: 5000,
                kkt_tol: 1e-9 * (1.0 + lipschitz),
                record_history: false,
            };
            let run = qp::minimize_projected(f, grad, project, lipschitz, x.clone(), &opts);
            x = run.x;

            let v = g_arm.transpose() * &x;
            let mut viol: f64 = 0.0;
            let mut worst = 0usize;
            for j in 0..k {
                let over = (v[j].abs() - tol).max(0.0);
                if over > viol {
                    viol = over;
                    worst = j;
                }
            }
            if viol < last_violation {
                last_violation = viol;
                worst_moment = worst;
            }
            if best.as_ref().is_none_or(|(_, bv)| viol < *bv) {
                best = Some((x.clone(), viol));
            }
            if viol <= 1e-8 {
                break;
            }
            for j in 0..k {
                mu[j] = (mu[j] + rho * (v[j] - tol)).max(0.0);
                nu[j] = (nu[j] + rho * (-v[j] - tol)).max(0.0);
            }
            if viol > 0.5 * prev_viol {
                rho = (rho * 10.0).min(1e8);
            }
            prev_viol = viol;
        }

        if let Some((w_best, viol)) = best {
            if viol <= 1e-8 {
                return Ok((w_best, tol, viol));
            }
        }
    }

    let name = names
        .get(worst_moment)
        .cloned()
        .unwrap_or_else(|| format!("#{}", worst_moment + 1));
    Err(Error::NoConvergence(format!(
        "arm {arm}: no balance tolerance in the grid is feasible; tightest remaining violation {last_violation:.3e} on moment {name}"
    )))
}
