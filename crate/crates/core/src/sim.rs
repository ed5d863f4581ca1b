//! Replicated simulation studies comparing the weighting estimators across
//! increasing strengths of practical positivity violation.
//!
//! # Data-generating processes
//!
//! Covariates are iid standard normal. Writing `u = sum_k x_k`, the two
//! outcome/score families are
//!
//! * linear: `s(x) = u`,
//! * nonlinear: `s(x) = u + u^2`, which expands to
//!   `sum_k x_k + sum_k x_k^2 + sum_{k != m} x_k x_m` over ordered pairs.
//!
//! Each unit draws a single noise term `eps ~ N(0,1)` shared by both
//! potential outcomes:
//!
//! ```text
//! Y(0) = alpha + s(x) + eps,    Y(1) = Y(0) + delta,
//! pi   = expit(beta * s(x)),    T ~ Bernoulli(pi).
//! ```
//!
//! The intercept `alpha = -delta * E[T] - E[s(x)]` makes the marginal mean of
//! the observed outcome zero; `E[T]` is computed once per (family, beta, K)
//! by a 10^6-draw Monte Carlo quadrature over the scalar `u ~ N(0, sqrt(K))`
//! and cached. Because the noise term is shared within a unit,
//! `Y_i(1) - Y_i(0) = delta` exactly, so the realized sample average effect
//! equals `delta` in every replication.
//!
//! Misspecified scenarios (supported for K = 2 only) hand the analysis
//! methods the transformed covariates `Z1 = (2 + X1)/exp(X1)` and
//! `Z2 = ((X1*X2/25) + 1)^3`, while treatment and outcome are still generated
//! from the original `X`.
//!
//! # Determinism
//!
//! Every replication derives a counter-based seed from
//! (config seed, scenario, beta index, replication); method-level randomness
//! (hyperparameter restarts, bootstrap draws) derives a further seed with the
//! method index. Replications run in parallel but are collected in index
//! order and aggregated sequentially, so a run is bit-identical at any thread
//! count. Wall-time measurement is off by default because elapsed times are
//! the one output that cannot be reproduced byte-for-byte.

use std::collections::HashMap;
use std::str::FromStr;
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::data::{Dataset, Standardize};
use crate::error::{Error, Result};
use crate::estimators::{
    iptw_weights, regression_adjustment, sbw_weights, truncate_weights, wls_sate, EffectEstimate,
    DEFAULT_TRUNCATION, SBW_TOL_GRID,
};
use crate::gp::{self, TuneOptions};
use crate::kernels::{KernelSpec, MAX_DEGREE};
use crate::kom::{kom_weights, KomConfig};

/// Monte Carlo draws used to evaluate `E[T]` for the intercept centering.
const QUADRATURE_DRAWS: usize = 1_000_000;

/// Fixed internal seed for the quadrature stream, independent of user seeds.
const QUADRATURE_SEED: u64 = 0x5eed_ab1e_0000_0001;

/// Bootstrap draws behind the regression-adjustment standard error.
const RA_BOOTSTRAP_DRAWS: usize = 200;

/// Outcome/score family of the data-generating process.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DgpKind {
    /// `s(x) = sum_k x_k`.
    Linear,
    /// `s(x) = sum_k x_k + (sum_k x_k)^2`.
    Nonlinear,
}

/// A simulation scenario: the DGP family crossed with whether the analysis
/// methods observe the transformed (misspecified) covariates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Scenario {
    /// Outcome/score family.
    pub kind: DgpKind,
    /// When true, methods see `(Z1, Z2)` instead of `(X1, X2)`.
    pub misspecified: bool,
}

impl Scenario {
    pub const CORRECT_LINEAR: Scenario = Scenario {
        kind: DgpKind::Linear,
        misspecified: false,
    };
    pub const CORRECT_NONLINEAR: Scenario = Scenario {
        kind: DgpKind::Nonlinear,
        misspecified: false,
    };
    pub const MISSPECIFIED_LINEAR: Scenario = Scenario {
        kind: DgpKind::Linear,
        misspecified: true,
    };
    pub const MISSPECIFIED_NONLINEAR: Scenario = Scenario {
        kind: DgpKind::Nonlinear,
        misspecified: true,
    };

    /// All four scenarios in reporting order.
    pub const ALL: [Scenario; 4] = [
        Scenario::CORRECT_LINEAR,
        Scenario::CORRECT_NONLINEAR,
        Scenario::MISSPECIFIED_LINEAR,
        Scenario::MISSPECIFIED_NONLINEAR,
    ];

    /// Stable label used in result rows and on the command line.
    pub fn label(&self) -> &'static str {
        match (self.kind, self.misspecified) {
            (DgpKind::Linear, false) => "correct_linear",
            (DgpKind::Nonlinear, false) => "correct_nonlinear",
            (DgpKind::Linear, true) => "misspecified_linear",
            (DgpKind::Nonlinear, true) => "misspecified_nonlinear",
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .iter()
            .copied()
            .find(|sc| sc.label() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown scenario '{s}' (expected one of correct_linear, \
                     correct_nonlinear, misspecified_linear, misspecified_nonlinear)"
                ))
            })
    }
}

/// Polynomial degree every method uses in a scenario, matching the
/// information set convention of the benchmark: degree 1 for correct linear,
/// 2 for correct nonlinear, 3 under misspecification.
pub fn scenario_degree(scenario: Scenario) -> u32 {
    if scenario.misspecified {
        3
    } else {
        match scenario.kind {
            DgpKind::Linear => 1,
            DgpKind::Nonlinear => 2,
        }
    }
}

/// An estimator run on each simulated dataset. The degree selects the kernel
/// (for the kernel weighting method) or the monomial expansion (all others).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    /// Kernel optimal matching weights followed by weighted least squares.
    Kom { degree: u32 },
    /// Inverse propensity weighting with a logistic model on monomials.
    Iptw { degree: u32 },
    /// Inverse propensity weights truncated at the 1st/99th percentiles.
    TruncatedIptw { degree: u32 },
    /// Per-arm outcome regression; mean contrast of predicted outcomes.
    RegressionAdjustment { degree: u32 },
    /// Stable balancing weights on studentized monomial means.
    Sbw { degree: u32 },
    /// Returns the realized true effect exactly; a plumbing check.
    Oracle,
}

impl Method {
    /// Stable label used in result rows and on the command line.
    pub fn label(&self) -> String {
        match *self {
            Method::Kom { degree } => format!("kom_d{degree}"),
            Method::Iptw { degree } => format!("iptw_d{degree}"),
            Method::TruncatedIptw { degree } => format!("tiptw_d{degree}"),
            Method::RegressionAdjustment { degree } => format!("ra_d{degree}"),
            Method::Sbw { degree } => format!("sbw_d{degree}"),
            Method::Oracle => "oracle".to_string(),
        }
    }

    /// Degree parameter, when the method has one.
    pub fn degree(&self) -> Option<u32> {
        match *self {
            Method::Kom { degree }
            | Method::Iptw { degree }
            | Method::TruncatedIptw { degree }
            | Method::RegressionAdjustment { degree }
            | Method::Sbw { degree } => Some(degree),
            Method::Oracle => None,
        }
    }

    /// Degree must lie in `1..=5`.
    pub fn validate(&self) -> Result<()> {
        if let Some(d) = self.degree() {
            if d == 0 || d > MAX_DEGREE {
                return Err(Error::InvalidArgument(format!(
                    "method degree must be between 1 and {MAX_DEGREE}, got {d}"
                )));
            }
        }
        Ok(())
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "oracle" {
            return Ok(Method::Oracle);
        }
        let err = || {
            Error::InvalidArgument(format!(
                "unknown method '{s}' (expected oracle or one of kom, iptw, tiptw, ra, sbw \
                 followed by _d<degree>, e.g. kom_d2)"
            ))
        };
        let (name, deg) = s.rsplit_once("_d").ok_or_else(err)?;
        let degree: u32 = deg.parse().map_err(|_| err())?;
        let method = match name {
            "kom" => Method::Kom { degree },
            "iptw" => Method::Iptw { degree },
            "tiptw" => Method::TruncatedIptw { degree },
            "ra" => Method::RegressionAdjustment { degree },
            "sbw" => Method::Sbw { degree },
            _ => return Err(err()),
        };
        method.validate()?;
        Ok(method)
    }
}

/// Configuration of one replicated comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    /// Scenario to simulate.
    pub scenario: Scenario,
    /// Positivity-violation strengths; all entries must be positive.
    pub beta_grid: Vec<f64>,
    /// Sample size per replication.
    pub n: usize,
    /// Number of covariates.
    pub k: usize,
    /// True treatment effect.
    pub delta: f64,
    /// Number of replications per (beta, method) cell.
    pub replications: usize,
    /// Root seed; every replication derives its own stream from it.
    pub seed: u64,
    /// Methods to compare.
    pub methods: Vec<Method>,
    /// Record mean wall time per method. Off by default so reruns are
    /// byte-identical.
    pub timing: bool,
}

impl SimConfig {
    /// Baseline configuration: n = 200, K = 2, delta = 1, default beta grid,
    /// 200 replications, no methods selected yet.
    pub fn new(scenario: Scenario) -> Self {
        SimConfig {
            scenario,
            beta_grid: Self::default_beta_grid(),
            n: 200,
            k: 2,
            delta: 1.0,
            replications: 200,
            seed: 0,
            methods: Vec::new(),
            timing: false,
        }
    }

    /// Seven equally spaced strengths from 0.1 to 3.0.
    pub fn default_beta_grid() -> Vec<f64> {
        let (lo, hi, m) = (0.1, 3.0, 7);
        (0..m)
            .map(|i| lo + (hi - lo) * i as f64 / (m - 1) as f64)
            .collect()
    }

    /// Correct linear scenario: kernel weights with a linear kernel versus
    /// plain and truncated inverse propensity weighting, all at degree 1.
    pub fn figure1(seed: u64, replications: usize) -> Self {
        let mut c = Self::new(Scenario::CORRECT_LINEAR);
        c.seed = seed;
        c.replications = replications;
        c.methods = vec![
            Method::Kom { degree: 1 },
            Method::Iptw { degree: 1 },
            Method::TruncatedIptw { degree: 1 },
        ];
        c
    }

    /// Correct nonlinear scenario: the same comparison at degree 2.
    pub fn figure2(seed: u64, replications: usize) -> Self {
        let mut c = Self::new(Scenario::CORRECT_NONLINEAR);
        c.seed = seed;
        c.replications = replications;
        c.methods = vec![
            Method::Kom { degree: 2 },
            Method::Iptw { degree: 2 },
            Method::TruncatedIptw { degree: 2 },
        ];
        c
    }

    /// Coverage comparison at the strongest positivity violation (beta = 3):
    /// all five methods in each of the four scenarios, degrees matched to the
    /// scenario (1 / 2 / 3 / 3).
    pub fn table1(seed: u64, replications: usize) -> Vec<Self> {
        Scenario::ALL
            .iter()
            .map(|&scenario| {
                let d = scenario_degree(scenario);
                let mut c = Self::new(scenario);
                c.seed = seed;
                c.replications = replications;
                c.beta_grid = vec![3.0];
                c.methods = vec![
                    Method::Kom { degree: d },
                    Method::Iptw { degree: d },
                    Method::TruncatedIptw { degree: d },
                    Method::RegressionAdjustment { degree: d },
                    Method::Sbw { degree: d },
                ];
                c
            })
            .collect()
    }

    /// Check the configuration before running.
    pub fn validate(&self) -> Result<()> {
        if self.beta_grid.is_empty() {
            return Err(Error::InvalidArgument("beta grid must not be empty".into()));
        }
        for &b in &self.beta_grid {
            if !(b.is_finite() && b > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "beta grid values must be finite and positive, got {b}"
                )));
            }
        }
        if self.n < 4 {
            return Err(Error::InvalidArgument(format!(
                "sample size must be at least 4, got {}",
                self.n
            )));
        }
        if self.k == 0 {
            return Err(Error::InvalidArgument(
                "covariate count must be at least 1".into(),
            ));
        }
        if self.scenario.misspecified && self.k != 2 {
            return Err(Error::InvalidArgument(format!(
                "misspecified scenarios support exactly 2 covariates, got {}",
                self.k
            )));
        }
        if !self.delta.is_finite() {
            return Err(Error::InvalidArgument("delta must be finite".into()));
        }
        if self.replications == 0 {
            return Err(Error::InvalidArgument(
                "need at least one replication".into(),
            ));
        }
        if self.methods.is_empty() {
            return Err(Error::InvalidArgument(
                "method list must not be empty".into(),
            ));
        }
        for m in &self.methods {
            m.validate()?;
        }
        Ok(())
    }
}

/// Ground truth carried alongside each simulated dataset.
#[derive(Clone, Debug)]
pub struct Truth {
    /// Realized sample average treatment effect: mean of `y1 - y0`. Equals
    /// `delta` exactly under these DGPs.
    pub sate_true: f64,
    /// True propensity scores that drew the treatment vector.
    pub propensity: DVector<f64>,
    /// Potential outcomes under control.
    pub y0: DVector<f64>,
    /// Potential outcomes under treatment.
    pub y1: DVector<f64>,
}

/// Numerically stable logistic function.
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Score as a function of the covariate sum `u`.
fn score_of_sum(kind: DgpKind, u: f64) -> f64 {
    match kind {
        DgpKind::Linear => u,
        DgpKind::Nonlinear => u + u * u,
    }
}

/// Closed-form `E[s(X)]`: 0 for the linear family; K for the nonlinear one
/// (each squared covariate contributes `E[x^2] = 1`, the cross terms average
/// to zero).
fn expected_score(kind: DgpKind, k: usize) -> f64 {
    match kind {
        DgpKind::Linear => 0.0,
        DgpKind::Nonlinear => k as f64,
    }
}

/// Expected treated fraction `E[expit(beta * s(U))]` with `U ~ N(0, sqrt(K))`,
/// evaluated by a fixed-seed Monte Carlo quadrature and cached per
/// (family, beta, K). The covariate sum is exactly normal with variance K,
/// so the integral is one-dimensional for both families.
pub fn expected_treated_fraction(kind: DgpKind, beta: f64, k: usize) -> f64 {
    type QuadratureCache = Mutex<HashMap<(DgpKind, u64, usize), f64>>;
    static CACHE: OnceLock<QuadratureCache> = OnceLock::new();
    let key = (kind, beta.to_bits(), k);
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(&v) = cache.lock().expect("quadrature cache poisoned").get(&key) {
        return v;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(QUADRATURE_SEED);
    let scale = (k as f64).sqrt();
    let mut acc = 0.0;
    for _ in 0..QUADRATURE_DRAWS {
        let z: f64 = rng.sample(StandardNormal);
        acc += expit(beta * score_of_sum(kind, scale * z));
    }
    let v = acc / QUADRATURE_DRAWS as f64;
    cache
        .lock()
        .expect("quadrature cache poisoned")
        .insert(key, v);
    v
}

/// Intercept that centers the marginal mean of the observed outcome at zero:
/// `alpha = -delta * E[T] - E[s(X)]`.
pub fn intercept(kind: DgpKind, beta: f64, k: usize, delta: f64) -> f64 {
    -delta * expected_treated_fraction(kind, beta, k) - expected_score(kind, k)
}

/// Analyst-visible covariate transform for the misspecified scenarios.
/// Requires exactly two covariates.
pub fn misspecify_covariates(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.ncols() != 2 {
        return Err(Error::InvalidArgument(format!(
            "misspecified scenarios support exactly 2 covariates, got {}",
            x.ncols()
        )));
    }
    let mut z = DMatrix::zeros(x.nrows(), 2);
    for i in 0..x.nrows() {
        let x1 = x[(i, 0)];
        let x2 = x[(i, 1)];
        z[(i, 0)] = (2.0 + x1) / x1.exp();
        z[(i, 1)] = (x1 * x2 / 25.0 + 1.0).powi(3);
    }
    Ok(z)
}

fn draw_covariates(n: usize, k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let mut x = DMatrix::zeros(n, k);
    for i in 0..n {
        for j in 0..k {
            x[(i, j)] = rng.sample(StandardNormal);
        }
    }
    x
}

fn propensities(kind: DgpKind, x: &DMatrix<f64>, beta: f64) -> DVector<f64> {
    DVector::from_fn(x.nrows(), |i, _| {
        expit(beta * score_of_sum(kind, x.row(i).sum()))
    })
}

/// Draw one dataset plus its ground truth. The RNG consumption order is
/// fixed: covariates, then treatment uniforms, then outcome noise.
pub fn generate(
    scenario: Scenario,
    n: usize,
    k: usize,
    beta: f64,
    delta: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Dataset, Truth)> {
    if scenario.misspecified && k != 2 {
        return Err(Error::InvalidArgument(format!(
            "misspecified scenarios support exactly 2 covariates, got {k}"
        )));
    }
    let x = draw_covariates(n, k, rng);
    let pi = propensities(scenario.kind, &x, beta);
    let t: Vec<u8> = (0..n).map(|i| u8::from(rng.gen::<f64>() < pi[i])).collect();

    let alpha = intercept(scenario.kind, beta, k, delta);
    let mut y0 = DVector::zeros(n);
    let mut y1 = DVector::zeros(n);
    let mut y = DVector::zeros(n);
    for i in 0..n {
        let eps: f64 = rng.sample(StandardNormal);
        y0[i] = alpha + score_of_sum(scenario.kind, x.row(i).sum()) + eps;
        y1[i] = y0[i] + delta;
        y[i] = if t[i] == 1 { y1[i] } else { y0[i] };
    }
    let sate_true = (&y1 - &y0).mean();

    let observed = if scenario.misspecified {
        misspecify_covariates(&x)?
    } else {
        x
    };
    let unit_ids = (1..=n).map(|i| i.to_string()).collect();
    let data = Dataset::new(observed, t, Some(y), unit_ids)?;
    Ok((
        data,
        Truth {
            sate_true,
            propensity: pi,
            y0,
            y1,
        },
    ))
}

/// Mean over replications of the smallest and largest realized propensity
/// score, reported as (mean of min, mean of max).
pub fn propensity_range(
    kind: DgpKind,
    n: usize,
    k: usize,
    beta: f64,
    replications: usize,
    seed: u64,
) -> (f64, f64) {
    let mut min_acc = 0.0;
    let mut max_acc = 0.0;
    for rep in 0..replications {
        let s = derive_seed(&[seed, 0x0072_616e_6765, rep as u64]);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let x = draw_covariates(n, k, &mut rng);
        let pi = propensities(kind, &x, beta);
        min_acc += pi.min();
        max_acc += pi.max();
    }
    let m = replications as f64;
    (min_acc / m, max_acc / m)
}

/// Kernel used by the kernel weighting method at a given polynomial degree.
pub fn kernel_for_degree(degree: u32) -> KernelSpec {
    if degree == 1 {
        KernelSpec::Linear
    } else {
        KernelSpec::Polynomial { degree }
    }
}

/// Run a single method on one simulated dataset. `seed` drives any
/// method-internal randomness (restarts, bootstrap).
pub fn estimate_one(
    data: &Dataset,
    truth: &Truth,
    method: Method,
    seed: u64,
) -> Result<EffectEstimate> {
    match method {
        Method::Oracle => Ok(EffectEstimate {
            tau_hat: truth.sate_true,
            se: 0.0,
            ci: (truth.sate_true, truth.sate_true),
        }),
        Method::Kom { degree } => {
            let spec = kernel_for_degree(degree);
            let view = data.studentize(Standardize::Full)?;
            let opts = TuneOptions {
                seed,
                ..TuneOptions::default()
            };
            let tuned = gp::tune(data, &view, spec, &opts)?;
            let config = KomConfig::from_tune(spec, &tuned);
            let solution = kom_weights(data, &view, &config)?;
            wls_sate(data, &solution.w)
        }
        Method::Iptw { degree } => {
            let (w, _) = iptw_weights(data, degree)?;
            wls_sate(data, &w)
        }
        Method::TruncatedIptw { degree } => {
            let (w, _) = iptw_weights(data, degree)?;
            let wt = truncate_weights(&w, DEFAULT_TRUNCATION.0, DEFAULT_TRUNCATION.1)?;
            wls_sate(data, &wt)
        }
        Method::RegressionAdjustment { degree } => {
            regression_adjustment(data, degree, RA_BOOTSTRAP_DRAWS, seed)
        }
        Method::Sbw { degree } => {
            let r = sbw_weights(data, degree, &SBW_TOL_GRID)?;
            wls_sate(data, &r.w)
        }
    }
}

/// Aggregated results for one (scenario, method, beta) cell. Failed
/// replications are excluded from the averages and counted in `failures`;
/// a cell where every replication failed reports NaN aggregates.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub scenario: String,
    pub method: String,
    pub beta: f64,
    /// Squared mean error over successful replications.
    pub bias_sq: f64,
    /// Mean squared error over successful replications.
    pub mse: f64,
    /// Fraction of successful replications whose Wald interval covers the
    /// realized true effect.
    pub coverage: f64,
    /// Mean seconds per successful replication; `None` unless timing was on.
    pub mean_runtime: Option<f64>,
    /// Replications where the method returned an error.
    pub failures: usize,
}

/// Long-format results, one row per (scenario, method, beta).
#[derive(Clone, Debug, PartialEq, Default)]
pub struct SimResult {
    pub cells: Vec<Cell>,
}

impl SimResult {
    /// Write the rows as CSV with the stable header
    /// `scenario,method,beta,bias_sq,mse,coverage,runtime,failures`.
    /// The runtime field is empty when timing was off.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "scenario", "method", "beta", "bias_sq", "mse", "coverage", "runtime", "failures",
        ])?;
        for c in &self.cells {
            w.write_record([
                c.scenario.as_str(),
                c.method.as_str(),
                &c.beta.to_string(),
                &c.bias_sq.to_string(),
                &c.mse.to_string(),
                &c.coverage.to_string(),
                &c.mean_runtime.map(|t| t.to_string()).unwrap_or_default(),
                &c.failures.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// The CSV rows as a string.
    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("CSV output is UTF-8"))
    }
}

/// SplitMix64 finalizer used for seed derivation.
fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive an independent stream seed from an ordered list of counters.
fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = 0x243f_6a88_85a3_08d3;
    for &p in parts {
        h = splitmix64(h ^ splitmix64(p));
    }
    h
}

fn scenario_tag(s: Scenario) -> u64 {
    u64::from(matches!(s.kind, DgpKind::Nonlinear)) | (u64::from(s.misspecified) << 1)
}

struct MethodOutcome {
    error: f64,
    covered: bool,
    secs: f64,
}

fn run_rep(
    config: &SimConfig,
    beta_idx: usize,
    beta: f64,
    rep: usize,
) -> Vec<Result<MethodOutcome>> {
    let tag = scenario_tag(config.scenario);
    let data_seed = derive_seed(&[config.seed, tag, beta_idx as u64, rep as u64]);
    let mut rng = ChaCha8Rng::seed_from_u64(data_seed);
    match generate(
        config.scenario,
        config.n,
        config.k,
        beta,
        config.delta,
        &mut rng,
    ) {
        Err(e) => {
            let msg = e.to_string();
            config
                .methods
                .iter()
                .map(|_| {
                    Err(Error::Numerical(format!(
                        "replication {rep}: data generation failed: {msg}"
                    )))
                })
                .collect()
        }
        Ok((data, truth)) => config
            .methods
            .iter()
            .enumerate()
            .map(|(m_idx, &method)| {
                let m_seed = derive_seed(&[
                    config.seed,
                    tag,
                    beta_idx as u64,
                    rep as u64,
                    0x6d65_7468 + m_idx as u64,
                ]);
                let start = Instant::now();
                estimate_one(&data, &truth, method, m_seed).map(|est| MethodOutcome {
                    error: est.tau_hat - truth.sate_true,
                    covered: est.covers(truth.sate_true),
                    secs: start.elapsed().as_secs_f64(),
                })
            })
            .collect(),
    }
}

/// Run the replicated comparison. Replications execute in parallel on the
/// current thread pool; failures are counted per cell, never fatal.
pub fn run(config: &SimConfig) -> Result<SimResult> {
    config.validate()?;
    let mut cells = Vec::with_capacity(config.beta_grid.len() * config.methods.len());
    for (beta_idx, &beta) in config.beta_grid.iter().enumerate() {
        let outcomes: Vec<Vec<Result<MethodOutcome>>> = (0..config.replications)
            .into_par_iter()
            .map(|rep| run_rep(config, beta_idx, beta, rep))
            .collect();
        for (m_idx, method) in config.methods.iter().enumerate() {
            let mut errors = Vec::with_capacity(config.replications);
            let mut covered = 0usize;
            let mut failures = 0usize;
            let mut secs = 0.0;
            for rep in &outcomes {
                match &rep[m_idx] {
                    Ok(o) => {
                        errors.push(o.error);
                        if o.covered {
                            covered += 1;
                        }
                        secs += o.secs;
                    }
                    Err(_) => failures += 1,
                }
            }
            let cell = if errors.is_empty() {
                Cell {
                    scenario: config.scenario.label().to_string(),
                    method: method.label(),
                    beta,
                    bias_sq: f64::NAN,
                    mse: f64::NAN,
                    coverage: f64::NAN,
                    mean_runtime: None,
                    failures,
                }
            } else {
                let m = errors.len() as f64;
                let bias = errors.iter().sum::<f64>() / m;
                let mse = errors.iter().map(|e| e * e).sum::<f64>() / m;
                Cell {
                    scenario: config.scenario.label().to_string(),
                    method: method.label(),
                    beta,
                    bias_sq: bias * bias,
                    mse,
                    coverage: covered as f64 / m,
                    mean_runtime: config.timing.then(|| secs / m),
                    failures,
                }
            };
            cells.push(cell);
        }
    }
    Ok(SimResult { cells })
}

/// Configuration for the increasing-confounders comparison: the correct
/// linear scenario at a fixed strength while the covariate count grows.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfounderStudyConfig {
    pub k_grid: Vec<usize>,
    pub beta: f64,
    pub n: usize,
    pub delta: f64,
    pub replications: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
    pub timing: bool,
}

impl Default for ConfounderStudyConfig {
    fn default() -> Self {
        ConfounderStudyConfig {
            k_grid: vec![2, 20, 50, 100],
            beta: 2.0,
            n: 200,
            delta: 1.0,
            replications: 200,
            seed: 0,
            methods: vec![
                Method::Kom { degree: 1 },
                Method::RegressionAdjustment { degree: 1 },
                Method::Sbw { degree: 1 },
            ],
            timing: false,
        }
    }
}

/// Run the correct linear scenario over a grid of covariate counts. Each
/// count K reuses the plain harness with the same seed, so a single-entry
/// grid reproduces the corresponding main-grid cell exactly; rows are
/// labelled `correct_linear_k<K>`.
pub fn increasing_confounders_study(config: &ConfounderStudyConfig) -> Result<SimResult> {
    if config.k_grid.is_empty() {
        return Err(Error::InvalidArgument(
            "covariate-count grid must not be empty".into(),
        ));
    }
    let mut cells = Vec::new();
    for &k in &config.k_grid {
        let sub = SimConfig {
            scenario: Scenario::CORRECT_LINEAR,
            beta_grid: vec![config.beta],
            n: config.n,
            k,
            delta: config.delta,
            replications: config.replications,
            seed: config.seed,
            methods: config.methods.clone(),
            timing: config.timing,
        };
        let mut result = run(&sub)?;
        for c in &mut result.cells {
            c.scenario = format!("correct_linear_k{k}");
        }
        cells.append(&mut result.cells);
    }
    Ok(SimResult { cells })
}
