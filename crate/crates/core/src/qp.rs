//! Projected-gradient solver for quadratic programs over per-arm simplices.
//!
//! The central problem is
//!
//! `minimize  w' Q w - 2 c' w   over  w >= 0,
//!            sum_{i treated} w_i = s,  sum_{i control} w_i = s`,
//!
//! with `Q` symmetric positive semidefinite. The solver is a monotone
//! accelerated projected-gradient method (MFISTA) with adaptive restart;
//! each iteration projects onto the product of the two scaled simplices by
//! the exact sort-and-threshold rule. The same engine also powers the
//! penalized solves used elsewhere in the crate, so it accepts arbitrary
//! convex objectives through closures.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Default convergence tolerance for the first-order residual.
pub const DEFAULT_TOL: f64 = 1e-6;

/// Default iteration cap.
pub const DEFAULT_MAX_ITER: usize = 50_000;

/// Relative objective-decrease threshold used alongside the residual test.
const REL_DECREASE_TOL: f64 = 1e-8;

/// Iterations between convergence checks.
const CHECK_EVERY: usize = 8;

/// A quadratic program `min w'Qw - 2c'w` over the per-arm simplices defined
/// by the treatment vector `t` and the common arm total `s`.
#[derive(Debug, Clone)]
pub struct QpProblem {
    /// Symmetric positive semidefinite quadratic term.
    pub q: DMatrix<f64>,
    /// Linear term (the objective subtracts `2 c' w`).
    pub c: DVector<f64>,
    /// Treatment indicator per unit (0 or 1); both arms must be nonempty.
    pub t: Vec<u8>,
    /// Total weight per arm; the methodology uses `s = 1`.
    pub s: f64,
}

impl QpProblem {
    /// Validates shapes, symmetry, finiteness, and arm structure.
    pub fn new(q: DMatrix<f64>, c: DVector<f64>, t: Vec<u8>, s: f64) -> Result<Self> {
        let n = t.len();
        if q.nrows() != n || q.ncols() != n || c.len() != n || n == 0 {
            return Err(Error::InvalidArgument(format!(
                "inconsistent QP shapes: Q is {}x{}, c has {}, t has {}",
                q.nrows(),
                q.ncols(),
                c.len(),
                n
            )));
        }
        if q.iter().any(|v| !v.is_finite()) || c.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite QP coefficients".into()));
        }
        let scale = q.amax().max(1.0);
        for j in 0..n {
            for i in 0..j {
                if (q[(i, j)] - q[(j, i)]).abs() > 1e-8 * scale {
                    return Err(Error::InvalidArgument(format!(
                        "Q is not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        if t.iter().any(|&ti| ti > 1) {
            return Err(Error::InvalidArgument(
                "treatment values must be 0 or 1".into(),
            ));
        }
        let n1 = t.iter().filter(|&&ti| ti == 1).count();
        if n1 == 0 || n1 == n {
            return Err(Error::InvalidArgument(
                "both treatment arms must be nonempty".into(),
            ));
        }
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "arm total s must be positive and finite, got {s}"
            )));
        }
        Ok(QpProblem { q, c, t, s })
    }

    /// Number of units.
    pub fn n(&self) -> usize {
        self.t.len()
    }

    /// Objective `w'Qw - 2c'w` under the stated (unrepaired) `Q`.
    pub fn objective(&self, w: &DVector<f64>) -> f64 {
        w.dot(&(&self.q * w)) - 2.0 * self.c.dot(w)
    }

    /// Uniform feasible point: `s / n_arm` within each arm.
    pub fn uniform_start(&self) -> DVector<f64> {
        uniform_feasible(&self.t, self.s)
    }
}

/// Uniform feasible point for the per-arm simplices: `s / n_arm` per unit.
pub fn uniform_feasible(t: &[u8], s: f64) -> DVector<f64> {
    let n1 = t.iter().filter(|&&ti| ti == 1).count();
    let n0 = t.len() - n1;
    DVector::from_fn(t.len(), |i, _| {
        if t[i] == 1 {
            s / n1 as f64
        } else {
            s / n0 as f64
        }
    })
}

/// Solution of a [`QpProblem`].
#[derive(Debug, Clone)]
pub struct QpSolution {
    /// Weights, elementwise nonnegative with each arm summing to `s`.
    pub w: DVector<f64>,
    /// Objective `w'Qw - 2c'w` at `w`, evaluated under the stated `Q`.
    pub objective: f64,
    /// Projected-gradient residual `||w - P(w - eta g)||_inf / eta`.
    pub kkt_residual: f64,
    /// Iterations taken.
    pub iterations: usize,
    /// Whether both convergence tests passed before the iteration cap. A
    /// `false` value still carries the best iterate found.
    pub converged: bool,
    /// Diagonal shift added to `Q` during iteration when the estimated
    /// smallest eigenvalue was negative; zero for well-posed inputs.
    pub psd_shift: f64,
}

/// Euclidean projection onto the scaled simplex `{w >= 0, sum w = s}`
/// restricted to `idx`, written into `out` (other entries untouched).
fn project_simplex_into(v: &DVector<f64>, idx: &[usize], s: f64, out: &mut DVector<f64>) {
    let mut sorted: Vec<f64> = idx.iter().map(|&i| v[i]).collect();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cumsum = 0.0;
    let mut tau = sorted[0] - s;
    for (j, &vj) in sorted.iter().enumerate() {
        cumsum += vj;
        let candidate = (cumsum - s) / (j + 1) as f64;
        if vj - candidate > 0.0 {
            tau = candidate;
        }
    }
    for &i in idx {
        out[i] = (v[i] - tau).max(0.0);
    }
}

/// Euclidean projection of the whole vector onto the scaled simplex
/// `{w >= 0, sum w = s}`.
pub fn project_simplex(v: &DVector<f64>, s: f64) -> Result<DVector<f64>> {
    if v.is_empty() {
        return Err(Error::InvalidArgument("nothing to project".into()));
    }
    if !(s.is_finite() && s > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "simplex total must be positive and finite, got {s}"
        )));
    }
    let idx: Vec<usize> = (0..v.len()).collect();
    let mut out = v.clone();
    project_simplex_into(v, &idx, s, &mut out);
    Ok(out)
}

/// Euclidean projection onto the product of per-arm scaled simplices:
/// treated entries sum to `s`, control entries sum to `s`, all nonnegative.
pub fn project_product_simplex(v: &DVector<f64>, t: &[u8], s: f64) -> Result<DVector<f64>> {
    if v.len() != t.len() || t.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "projection shapes differ: {} values, {} treatments",
            v.len(),
            t.len()
        )));
    }
    if !(s.is_finite() && s > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "arm total s must be positive and finite, got {s}"
        )));
    }
    let treated: Vec<usize> = (0..t.len()).filter(|&i| t[i] == 1).collect();
    let control: Vec<usize> = (0..t.len()).filter(|&i| t[i] != 1).collect();
    if treated.is_empty() || control.is_empty() {
        return Err(Error::InvalidArgument(
            "both treatment arms must be nonempty".into(),
        ));
    }
    let mut out = v.clone();
    project_simplex_into(v, &treated, s, &mut out);
    project_simplex_into(v, &control, s, &mut out);
    Ok(out)
}

/// Options for the generic projected-descent engine.
#[derive(Debug, Clone)]
pub struct EngineOptions {
    /// Iteration cap.
    pub max_iter: usize,
    /// Absolute tolerance on the projected-gradient residual.
    pub kkt_tol: f64,
    /// Record the objective after every iteration (for diagnostics/tests).
    pub record_history: bool,
}

impl Default for EngineOptions {
    fn default() -> Self {
        EngineOptions {
            max_iter: DEFAULT_MAX_ITER,
            kkt_tol: DEFAULT_TOL,
            record_history: false,
        }
    }
}

/// Result of [`minimize_projected`].
#[derive(Debug, Clone)]
pub struct EngineResult {
    /// Best feasible iterate found.
    pub x: DVector<f64>,
    /// Objective at `x`.
    pub objective: f64,
    /// Final projected-gradient residual at `x`.
    pub kkt_residual: f64,
    /// Iterations taken.
    pub iterations: usize,
    /// Whether the residual and objective-decrease tests both passed.
    pub converged: bool,
    /// Objective per iteration when requested, else empty.
    pub history: Vec<f64>,
}

/// Monotone accelerated projected descent (MFISTA with adaptive restart)
/// for `min f(x)` over a convex set given by its Euclidean projection.
///
/// `lipschitz` must upper-bound the Lipschitz constant of `grad`; the step
/// size is its reciprocal. Stops when the projected-gradient residual falls
/// below `kkt_tol` and the objective decrease between successive checks is
/// relatively below 1e-8, or at `max_iter` with `converged = false`.
pub fn minimize_projected<F, G, P>(
    f: F,
    grad: G,
    project: P,
    lipschitz: f64,
    x0: DVector<f64>,
    opts: &EngineOptions,
) -> EngineResult
where
    F: Fn(&DVector<f64>) -> f64,
    G: Fn(&DVector<f64>) -> DVector<f64>,
    P: Fn(&DVector<f64>) -> DVector<f64>,
{
    let eta = 1.0 / lipschitz.max(1e-300);
    let mut x = project(&x0);
    let mut f_x = f(&x);
    let mut y = x.clone();
    let mut t_acc = 1.0_f64;
    let mut history = Vec::new();
    if opts.record_history {
        history.push(f_x);
    }

    let residual_at = |x: &DVector<f64>| -> f64 {
        let g = grad(x);
        let z = project(&(x - eta * &g));
        (x - z).amax() / eta
    };

    let mut f_prev_check = f_x;
    let mut kkt = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        iterations += 1;
        let g_y = grad(&y);
        let z = project(&(&y - eta * &g_y));
        let f_z = f(&z);

        // Monotone step: keep the better of the accelerated point and the
        // previous iterate.
        let x_old = x.clone();
        if f_z <= f_x {
            x = z.clone();
            f_x = f_z;
        }

        // Adaptive restart when the momentum points uphill.
        if (&y - &z).dot(&(&z - &x_old)) > 0.0 {
            t_acc = 1.0;
            y = x.clone();
        } else {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t_acc * t_acc).sqrt());
            let a = t_acc / t_next;
            let b = (t_acc - 1.0) / t_next;
            y = &x + a * (&z - &x) + b * (&x - &x_old);
            t_acc = t_next;
        }
        if opts.record_history {
            history.push(f_x);
        }

        if iterations % CHECK_EVERY == 0 {
            let rel_dec = (f_prev_check - f_x) / (1.0 + f_prev_check.abs());
            if rel_dec <= REL_DECREASE_TOL {
                kkt = residual_at(&x);
                if kkt <= opts.kkt_tol {
                    converged = true;
                    break;
                }
            }
            f_prev_check = f_x;
        }
    }

    if !converged {
        kkt = residual_at(&x);
        if kkt <= opts.kkt_tol {
            // The cap landed between checks; accept the iterate.
            converged = true;
        }
    }

    EngineResult {
        objective: f_x,
        x,
        kkt_residual: kkt,
        iterations,
        converged,
        history,
    }
}

/// Largest-eigenvalue estimate for a symmetric matrix via 50 power-iteration
/// steps from a fixed deterministic start.
pub fn largest_eigenvalue_symmetric(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut v = DVector::from_fn(n, |i, _| 1.0 + 0.5 * (((i + 1) as f64) * 0.7).sin());
    v /= v.norm();
    let mut lam = 0.0;
    for _ in 0..50 {
        let mv = m * &v;
        let norm = mv.norm();
        if norm <= 1e-300 {
            return 0.0;
        }
        lam = v.dot(&mv);
        v = mv / norm;
    }
    lam
}

/// Solves the per-arm-simplex QP. Never fails on slow convergence: the best
/// iterate is returned with `converged = false` if the cap is hit.
pub fn solve(prob: &QpProblem, tol: f64, max_iter: usize) -> Result<QpSolution> {
    // Re-validate so hand-built structs get the same checks as `new`.
    let checked = QpProblem::new(prob.q.clone(), prob.c.clone(), prob.t.clone(), prob.s)?;
    if !(tol.is_finite() && tol > 0.0) || max_iter == 0 {
        return Err(Error::InvalidArgument(
            "solver needs a positive tolerance and iteration cap".into(),
        ));
    }
    let QpProblem { q, c, t, s } = checked;
    let n = t.len();

    // Estimate the extreme eigenvalues; repair slight indefiniteness with a
    // diagonal shift so the descent theory applies.
    let lam_max = largest_eigenvalue_symmetric(&q).max(0.0) * 1.05;
    let mu = lam_max.max(1e-12);
    let flipped = DMatrix::from_fn(n, n, |i, j| {
        let base = if i == j { mu } else { 0.0 };
        base - q[(i, j)]
    });
    let lam_min = mu - largest_eigenvalue_symmetric(&flipped);
    let (q_solve, psd_shift) = if lam_min < 0.0 {
        let shift = lam_min.abs() * 1.01;
        let mut q2 = q.clone();
        for i in 0..n {
            q2[(i, i)] += shift;
        }
        (q2, shift)
    } else {
        (q.clone(), 0.0)
    };

    // Gradient of w'Qw - 2c'w is 2(Qw - c): Lipschitz constant 2*lambda_max.
    let lipschitz = (2.0 * (lam_max + psd_shift)).max(1e-12);
    let f = |w: &DVector<f64>| w.dot(&(&q_solve * w)) - 2.0 * c.dot(w);
    let g = |w: &DVector<f64>| 2.0 * (&q_solve * w - &c);
    let proj = |w: &DVector<f64>| project_product_simplex(w, &t, s).expect("validated arms");

    let opts = EngineOptions {
        max_iter,
        kkt_tol: tol * (1.0 + c.amax()),
        record_history: false,
    };
    let run = minimize_projected(f, g, proj, lipschitz, uniform_feasible(&t, s), &opts);

    let mut w = run.x;
    for v in w.iter_mut() {
        if *v < 0.0 {
            *v = 0.0; // projection guarantees >= 0 up to rounding
        }
    }
    debug_assert!({
        let sum1: f64 = (0..n).filter(|&i| t[i] == 1).map(|i| w[i]).sum();
        let sum0: f64 = (0..n).filter(|&i| t[i] != 1).map(|i| w[i]).sum();
        (sum1 - s).abs() < 1e-9 && (sum0 - s).abs() < 1e-9
    });

    let objective = w.dot(&(&q * &w)) - 2.0 * c.dot(&w);
    Ok(QpSolution {
        w,
        objective,
        kkt_residual: run.kkt_residual,
        iterations: run.iterations,
        converged: run.converged,
        psd_shift,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn simplex_projection_bisection(v: &[f64], s: f64) -> Vec<f64> {
        // Oracle: find tau with sum max(v - tau, 0) = s by bisection.
        let mut lo = v.iter().fold(f64::INFINITY, |a, &b| a.min(b)) - s - 1.0;
        let mut hi = v.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let sum: f64 = v.iter().map(|&x| (x - mid).max(0.0)).sum();
            if sum > s {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let tau = 0.5 * (lo + hi);
        v.iter().map(|&x| (x - tau).max(0.0)).collect()
    }

    #[test]
    fn projection_matches_hand_cases() {
        // Already-feasible points are fixed.
        let v = DVector::from_vec(vec![0.25, 0.75, 1.0]);
        let t = vec![1, 1, 0];
        let w = project_product_simplex(&v, &t, 1.0).unwrap();
        assert_abs_diff_eq!(w[0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(w[1], 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(w[2], 1.0, epsilon = 1e-12);

        // n=2 with one unit per arm is forced to (1, 1).
        let v2 = DVector::from_vec(vec![-3.0, 7.0]);
        let w2 = project_product_simplex(&v2, &[1, 0], 1.0).unwrap();
        assert_abs_diff_eq!(w2[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(w2[1], 1.0, epsilon = 1e-12);

        // A clearly-negative coordinate is clipped to zero.
        let v3 = DVector::from_vec(vec![0.9, 0.1, -2.0, 0.5]);
        let t3 = vec![1, 1, 1, 0];
        let w3 = project_product_simplex(&v3, &t3, 1.0).unwrap();
        assert_abs_diff_eq!(w3[0], 0.9, epsilon = 1e-12);
        assert_abs_diff_eq!(w3[1], 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(w3[2], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(w3[3], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn projection_matches_bisection_oracle_on_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for case in 0..100 {
            let n = rng.gen_range(2..12);
            let n1 = rng.gen_range(1..n);
            let mut t = vec![0u8; n];
            for ti in t.iter_mut().take(n1) {
                *ti = 1;
            }
            t.shuffle(&mut rng);
            let s = [0.5, 1.0, 3.0][case % 3];
            let v = DVector::from_fn(n, |_, _| rng.gen_range(-4.0..4.0));
            let got = project_product_simplex(&v, &t, s).unwrap();
            for arm in [1u8, 0u8] {
                let idx: Vec<usize> = (0..n).filter(|&i| t[i] == arm).collect();
                let vals: Vec<f64> = idx.iter().map(|&i| v[i]).collect();
                let want = simplex_projection_bisection(&vals, s);
                for (k, &i) in idx.iter().enumerate() {
                    assert_abs_diff_eq!(got[i], want[k], epsilon = 1e-9);
                }
                let sum: f64 = idx.iter().map(|&i| got[i]).sum();
                assert_abs_diff_eq!(sum, s, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn identity_q_zero_c_gives_uniform_weights() {
        let prob = QpProblem::new(
            DMatrix::identity(4, 4),
            DVector::zeros(4),
            vec![1, 1, 0, 0],
            1.0,
        )
        .unwrap();
        let sol = solve(&prob, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        for i in 0..4 {
            assert_abs_diff_eq!(sol.w[i], 0.5, epsilon = 1e-8);
        }
        assert_abs_diff_eq!(sol.objective, 1.0, epsilon = 1e-10);
        assert!(sol.converged);
        assert_eq!(sol.psd_shift, 0.0);
    }

    #[test]
    fn two_units_are_forced_regardless_of_coefficients() {
        let prob = QpProblem::new(
            DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0]),
            DVector::from_vec(vec![5.0, -7.0]),
            vec![1, 0],
            1.0,
        )
        .unwrap();
        let sol = solve(&prob, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert_abs_diff_eq!(sol.w[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.w[1], 1.0, epsilon = 1e-12);
        // Objective: [1,1] Q [1,1]' - 2 c'[1,1] = 7 - 2*(-2) = 11.
        assert_abs_diff_eq!(sol.objective, 11.0, epsilon = 1e-12);
    }

    #[test]
    fn diagonal_q_follows_inverse_weighting() {
        // With Q = diag(d) and c = 0, each arm minimizes sum d_i w_i^2
        // subject to sum w = 1, giving w_i proportional to 1/d_i.
        let d = [1.0, 2.0, 4.0, 1.5, 3.0, 6.0];
        let prob = QpProblem::new(
            DMatrix::from_diagonal(&DVector::from_row_slice(&d)),
            DVector::zeros(6),
            vec![1, 1, 1, 0, 0, 0],
            1.0,
        )
        .unwrap();
        let sol = solve(&prob, 1e-8, DEFAULT_MAX_ITER).unwrap();
        for arm in [1u8, 0u8] {
            let idx: Vec<usize> = (0..6).filter(|&i| prob.t[i] == arm).collect();
            let inv_sum: f64 = idx.iter().map(|&i| 1.0 / d[i]).sum();
            for &i in &idx {
                assert_abs_diff_eq!(sol.w[i], (1.0 / d[i]) / inv_sum, epsilon = 1e-8);
            }
        }
    }

    fn random_psd_problem(rng: &mut ChaCha8Rng, n: usize, ridge: f64) -> QpProblem {
        let a = DMatrix::from_fn(n, n + 2, |_, _| rng.gen_range(-1.0..1.0));
        let mut q = &a * a.transpose();
        for i in 0..n {
            q[(i, i)] += ridge;
        }
        let c = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let mut t = vec![0u8; n];
        let n1 = rng.gen_range(1..n);
        for ti in t.iter_mut().take(n1) {
            *ti = 1;
        }
        t.shuffle(rng);
        QpProblem::new(q, c, t, 1.0).unwrap()
    }

    fn random_feasible(rng: &mut ChaCha8Rng, t: &[u8], s: f64) -> DVector<f64> {
        let v = DVector::from_fn(t.len(), |_, _| rng.gen_range(-1.0..1.5));
        project_product_simplex(&v, t, s).unwrap()
    }

    /// Exhaustive support-enumeration oracle: solves the equality-constrained
    /// QP on every candidate support and returns the best feasible solution.
    fn active_set_oracle(prob: &QpProblem) -> (DVector<f64>, f64) {
        let n = prob.n();
        assert!(n <= 12);
        let mut best: Option<(DVector<f64>, f64)> = None;
        for mask in 1u32..(1 << n) {
            let support: Vec<usize> = (0..n).filter(|&i| mask & (1 << i) != 0).collect();
            let m = support.len();
            let any_treated = support.iter().any(|&i| prob.t[i] == 1);
            let any_control = support.iter().any(|&i| prob.t[i] != 1);
            if !any_treated || !any_control {
                continue;
            }
            // KKT system: [2 Q_SS  A'; A  0] [w; mu] = [2 c_S; s 1].
            let mut kkt = DMatrix::zeros(m + 2, m + 2);
            let mut rhs = DVector::zeros(m + 2);
            for (a, &i) in support.iter().enumerate() {
                for (b, &j) in support.iter().enumerate() {
                    kkt[(a, b)] = 2.0 * prob.q[(i, j)];
                }
                let row = if prob.t[i] == 1 { m } else { m + 1 };
                kkt[(row, a)] = 1.0;
                kkt[(a, row)] = 1.0;
                rhs[a] = 2.0 * prob.c[i];
            }
            rhs[m] = prob.s;
            rhs[m + 1] = prob.s;
            let Some(sol) = kkt.lu().solve(&rhs) else {
                continue;
            };
            if (0..m).any(|a| sol[a] < -1e-9) {
                continue;
            }
            let mut w = DVector::zeros(n);
            for (a, &i) in support.iter().enumerate() {
                w[i] = sol[a].max(0.0);
            }
            let obj = prob.objective(&w);
            if best.as_ref().is_none_or(|(_, b)| obj < *b) {
                best = Some((w, obj));
            }
        }
        best.expect("oracle found no feasible support")
    }

    #[test]
    fn random_problems_beat_sampling_and_match_active_set_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let prob = random_psd_problem(&mut rng, 6, 0.1);
            let sol = solve(&prob, 1e-7, DEFAULT_MAX_ITER).unwrap();
            assert!(sol.converged);

            // Feasibility.
            for i in 0..6 {
                assert!(sol.w[i] >= 0.0);
            }
            for arm in [1u8, 0u8] {
                let sum: f64 = (0..6).filter(|&i| prob.t[i] == arm).map(|i| sol.w[i]).sum();
                assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-9);
            }

            // No sampled feasible point does better.
            for _ in 0..2000 {
                let w = random_feasible(&mut rng, &prob.t, prob.s);
                assert!(prob.objective(&w) >= sol.objective - 1e-9);
            }

            // The support-enumeration oracle agrees.
            let (w_star, obj_star) = active_set_oracle(&prob);
            assert!((sol.objective - obj_star).abs() <= 1e-7);
            for i in 0..6 {
                assert_abs_diff_eq!(sol.w[i], w_star[i], epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn objective_history_is_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let prob = random_psd_problem(&mut rng, 8, 0.05);
        let lam = largest_eigenvalue_symmetric(&prob.q).max(0.0) * 1.05;
        let f = |w: &DVector<f64>| prob.objective(w);
        let g = |w: &DVector<f64>| 2.0 * (&prob.q * w - &prob.c);
        let pj = |w: &DVector<f64>| project_product_simplex(w, &prob.t, prob.s).unwrap();
        let opts = EngineOptions {
            record_history: true,
            ..Default::default()
        };
        let run = minimize_projected(f, g, pj, 2.0 * lam, prob.uniform_start(), &opts);
        assert!(run.converged);
        assert!(!run.history.is_empty());
        for pair in run.history.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12);
        }
    }

    #[test]
    fn solution_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let prob = random_psd_problem(&mut rng, 7, 0.5);
        let tol = 1e-7;
        let sol = solve(&prob, tol, DEFAULT_MAX_ITER).unwrap();

        let mut perm: Vec<usize> = (0..7).collect();
        perm.shuffle(&mut rng);
        let qp = DMatrix::from_fn(7, 7, |i, j| prob.q[(perm[i], perm[j])]);
        let cp = DVector::from_fn(7, |i, _| prob.c[perm[i]]);
        let tp: Vec<u8> = perm.iter().map(|&i| prob.t[i]).collect();
        let prob_p = QpProblem::new(qp, cp, tp, 1.0).unwrap();
        let sol_p = solve(&prob_p, tol, DEFAULT_MAX_ITER).unwrap();

        // Strong convexity (ridge 0.5) turns the shared residual tolerance
        // into a bound on the distance between the two solutions.
        for (i, &pi) in perm.iter().enumerate() {
            assert!((sol_p.w[i] - sol.w[pi]).abs() <= 2e-5);
        }
        assert!((sol_p.objective - sol.objective).abs() <= 1e-9);
    }

    #[test]
    fn indefinite_q_is_repaired_and_reported() {
        let mut q = DMatrix::identity(4, 4);
        q[(0, 0)] = -1e-3; // slightly indefinite
        let prob = QpProblem::new(q, DVector::zeros(4), vec![1, 1, 0, 0], 1.0).unwrap();
        let sol = solve(&prob, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert!(sol.psd_shift > 0.0);
        assert!(sol.w.iter().all(|&v| v.is_finite()));
        for arm in [1u8, 0u8] {
            let sum: f64 = (0..4).filter(|&i| prob.t[i] == arm).map(|i| sol.w[i]).sum();
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn power_iteration_finds_the_top_eigenvalue() {
        // Householder rotation of diag(1, 3, 7) keeps the spectrum.
        let v = DVector::from_vec(vec![1.0, 1.0, 1.0]).normalize();
        let h: DMatrix<f64> = DMatrix::identity(3, 3) - 2.0 * &v * v.transpose();
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 3.0, 7.0]));
        let m = &h * d * h.transpose();
        let lam = largest_eigenvalue_symmetric(&m);
        assert_abs_diff_eq!(lam, 7.0, epsilon = 1e-6);
    }

    #[test]
    fn malformed_problems_are_rejected() {
        // Mismatched shapes.
        assert!(QpProblem::new(
            DMatrix::identity(3, 3),
            DVector::zeros(2),
            vec![1, 0, 0],
            1.0
        )
        .is_err());
        // One-arm treatment vector.
        assert!(
            QpProblem::new(DMatrix::identity(2, 2), DVector::zeros(2), vec![1, 1], 1.0).is_err()
        );
        // Asymmetric Q.
        assert!(QpProblem::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]),
            DVector::zeros(2),
            vec![1, 0],
            1.0
        )
        .is_err());
        // Bad arm total.
        assert!(
            QpProblem::new(DMatrix::identity(2, 2), DVector::zeros(2), vec![1, 0], 0.0).is_err()
        );
        // Bad solver arguments.
        let ok =
            QpProblem::new(DMatrix::identity(2, 2), DVector::zeros(2), vec![1, 0], 1.0).unwrap();
        assert!(solve(&ok, 0.0, 10).is_err());
        assert!(solve(&ok, 1e-6, 0).is_err());
    }
}
