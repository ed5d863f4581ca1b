//! Implementations of the five subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use kom_core::nalgebra::DVector;
use serde::{Deserialize, Serialize};
use serde_json::json;

use kom_core::data::{Dataset, Standardize};
use kom_core::estimators::{
    iptw_weights, regression_adjustment, sbw_weights, truncate_weights, wls_sate,
    DEFAULT_TRUNCATION, SBW_TOL_GRID,
};
use kom_core::gp::{self, TuneOptions, TuneResult};
use kom_core::kernels::{gram, Hyperparams, KernelSpec};
use kom_core::kom::{kom_weights, worst_case_discrepancy_sq, KomConfig, WeightSolution};
use kom_core::sim::{
    increasing_confounders_study, kernel_for_degree, run as run_sim, ConfounderStudyConfig, Method,
    Scenario, SimConfig, SimResult,
};
use kom_core::Error;

use crate::manifest::{write_atomic, RunContext};
use crate::InputArgs;

/// Default bootstrap draws behind the regression-adjustment standard error.
const RA_BOOTSTRAP_DRAWS: usize = 200;

// ---------------------------------------------------------------------------
// Shared argument pieces
// ---------------------------------------------------------------------------

/// Kernel family override; the default is inferred from the degree
/// (linear at degree 1, polynomial otherwise).
#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelArg {
    Linear,
    Polynomial,
    Gaussian,
}

fn kernel_spec(arg: Option<KernelArg>, degree: u32) -> kom_core::Result<KernelSpec> {
    let spec = match arg {
        None => kernel_for_degree(degree),
        Some(KernelArg::Linear) => KernelSpec::Linear,
        Some(KernelArg::Polynomial) => KernelSpec::Polynomial { degree },
        Some(KernelArg::Gaussian) => KernelSpec::Gaussian,
    };
    spec.validate()?;
    Ok(spec)
}

/// Noise-variance choice for the weighting criterion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SigmaChoice {
    /// Per-unit variances from the tuned noise scales.
    Gp,
    /// One shared variance for all units.
    Homoskedastic(f64),
}

pub fn parse_sigma(s: &str) -> std::result::Result<SigmaChoice, String> {
    if s == "gp" {
        return Ok(SigmaChoice::Gp);
    }
    if let Some(rest) = s.strip_prefix("homoskedastic:") {
        let v: f64 = rest
            .parse()
            .map_err(|_| format!("cannot parse '{rest}' as a variance"))?;
        if !(v.is_finite() && v >= 0.0) {
            return Err(format!("variance must be finite and nonnegative, got {v}"));
        }
        return Ok(SigmaChoice::Homoskedastic(v));
    }
    Err("expected 'gp' or 'homoskedastic:<value>'".to_string())
}

fn sigma_label(sigma: SigmaChoice) -> String {
    match sigma {
        SigmaChoice::Gp => "gp".to_string(),
        SigmaChoice::Homoskedastic(v) => format!("homoskedastic:{v}"),
    }
}

/// A parsed `--degrees` value (kept as one unit so the flag takes a single
/// argument rather than repeated occurrences).
#[derive(Clone, Debug)]
pub struct DegreeList(pub Vec<u32>);

/// Degree list: either an inclusive range `a..b` or a comma list `a,b,c`.
pub fn parse_degrees(s: &str) -> std::result::Result<DegreeList, String> {
    let parse_one = |tok: &str| -> std::result::Result<u32, String> {
        let d: u32 = tok
            .trim()
            .parse()
            .map_err(|_| format!("cannot parse degree '{tok}'"))?;
        if !(1..=5).contains(&d) {
            return Err(format!("degree must be between 1 and 5, got {d}"));
        }
        Ok(d)
    };
    let degrees: Vec<u32> = if let Some((a, b)) = s.split_once("..") {
        let (a, b) = (parse_one(a)?, parse_one(b)?);
        if a > b {
            return Err(format!("empty degree range {a}..{b}"));
        }
        (a..=b).collect()
    } else {
        s.split(',')
            .map(parse_one)
            .collect::<std::result::Result<_, _>>()?
    };
    if degrees.is_empty() {
        return Err("no degrees given".to_string());
    }
    Ok(DegreeList(degrees))
}

/// Serializable hyperparameters: exact log values plus readable scales.
#[derive(Serialize, Deserialize, Clone, Copy)]
pub struct ParamsOut {
    pub log_gamma: f64,
    pub log_theta: f64,
    pub log_lambda: f64,
    pub gamma: f64,
    pub theta: f64,
    pub lambda: f64,
}

impl From<&Hyperparams> for ParamsOut {
    fn from(hp: &Hyperparams) -> Self {
        ParamsOut {
            log_gamma: hp.log_gamma,
            log_theta: hp.log_theta,
            log_lambda: hp.log_lambda,
            gamma: hp.gamma(),
            theta: hp.theta(),
            lambda: hp.lambda(),
        }
    }
}

impl ParamsOut {
    fn to_hyperparams(self) -> Hyperparams {
        Hyperparams {
            log_gamma: self.log_gamma,
            log_theta: self.log_theta,
            log_lambda: self.log_lambda,
        }
    }
}

#[derive(Serialize, Deserialize, Clone, Copy)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum SigmaOut {
    Gp,
    Homoskedastic { value: f64 },
}

#[derive(Serialize, Deserialize, Clone, Copy)]
pub struct SolverOut {
    pub kkt_residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub psd_shift: f64,
}

#[derive(Serialize, Deserialize, Clone, Copy)]
pub struct TuneOut {
    pub logml_treated: f64,
    pub logml_control: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl From<&TuneResult> for TuneOut {
    fn from(t: &TuneResult) -> Self {
        TuneOut {
            logml_treated: t.logml_treated,
            logml_control: t.logml_control,
            iterations: t.iterations,
            converged: t.converged,
        }
    }
}

/// Diagnostics file written next to kernel-optimal weights; `verify` reads
/// it back and recomputes every number from the raw inputs.
#[derive(Serialize, Deserialize)]
pub struct KomDiagnostics {
    pub method: String,
    pub kernel: KernelSpec,
    pub standardize: String,
    pub sigma: SigmaOut,
    pub params_treated: ParamsOut,
    pub params_control: ParamsOut,
    pub objective: f64,
    pub delta1_sq: f64,
    pub delta0_sq: f64,
    pub variance_term: f64,
    pub solver_objective: f64,
    pub constant: f64,
    pub solver: SolverOut,
    pub tune: Option<TuneOut>,
    pub warnings: Vec<String>,
}

// ---------------------------------------------------------------------------
// tune
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct TuneArgs {
    #[command(flatten)]
    pub io: InputArgs,

    /// Kernel family (default: linear at degree 1, polynomial otherwise).
    #[arg(long, value_enum)]
    pub kernel: Option<KernelArg>,

    /// Polynomial degree.
    #[arg(long, default_value_t = 1)]
    pub degree: u32,

    /// Random restarts for the optimizer.
    #[arg(long, default_value_t = 5)]
    pub restarts: usize,

    /// Seed for the restart draws.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Write the tuned parameters to this JSON file (also printed).
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Serialize)]
struct ArmParamsOut {
    #[serde(flatten)]
    params: ParamsOut,
    log_marginal_likelihood: f64,
}

pub fn cmd_tune(args: TuneArgs) -> Result<()> {
    let data = args.io.load()?;
    args.io.require_outcome(&data)?;
    let spec = kernel_spec(args.kernel, args.degree)?;
    let view = data.studentize(Standardize::Full)?;
    let opts = TuneOptions {
        restarts: args.restarts,
        seed: args.seed,
        ..TuneOptions::default()
    };
    let tuned = gp::tune(&data, &view, spec, &opts)?;

    let out = json!({
        "kernel": spec,
        "treated": ArmParamsOut {
            params: (&tuned.params_treated).into(),
            log_marginal_likelihood: tuned.logml_treated,
        },
        "control": ArmParamsOut {
            params: (&tuned.params_control).into(),
            log_marginal_likelihood: tuned.logml_control,
        },
        "iterations": tuned.iterations,
        "converged": tuned.converged,
    });
    let text = serde_json::to_string_pretty(&out)? + "\n";
    print!("{text}");

    if let Some(path) = &args.output {
        let snapshot = json!({
            "input": args.io.input.display().to_string(),
            "treatment_col": args.io.treatment_col,
            "outcome_col": args.io.outcome_col,
            "covariate_cols": args.io.covariate_cols,
            "kernel": spec,
            "degree": args.degree,
            "restarts": args.restarts,
        });
        let mut ctx = RunContext::new("tune", Some(args.seed), snapshot);
        ctx.record_input(&args.io.input)?;
        write_atomic(path, text.as_bytes())?;
        ctx.write_manifest_for(path)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// weights
// ---------------------------------------------------------------------------

/// Weighting methods that produce a weight per unit.
#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightMethod {
    Kom,
    Iptw,
    Tiptw,
    Sbw,
}

#[derive(Args)]
pub struct WeightsArgs {
    #[command(flatten)]
    pub io: InputArgs,

    /// Weighting method.
    #[arg(long, value_enum, default_value_t = WeightMethod::Kom)]
    pub method: WeightMethod,

    /// Kernel family for the kernel method.
    #[arg(long, value_enum)]
    pub kernel: Option<KernelArg>,

    /// Polynomial degree (kernel or design expansion).
    #[arg(long, default_value_t = 1)]
    pub degree: u32,

    /// Noise variances: `gp` (tuned per arm) or `homoskedastic:<value>`.
    #[arg(long, default_value = "gp", value_parser = parse_sigma)]
    pub sigma: SigmaChoice,

    /// Kernel output scale when sigma is homoskedastic (default 1).
    #[arg(long)]
    pub gamma: Option<f64>,

    /// Kernel input scale when sigma is homoskedastic (default 1/p).
    #[arg(long)]
    pub theta: Option<f64>,

    /// Solver tolerance.
    #[arg(long, default_value_t = kom_core::qp::DEFAULT_TOL)]
    pub tol: f64,

    /// Solver iteration cap.
    #[arg(long, default_value_t = kom_core::qp::DEFAULT_MAX_ITER)]
    pub max_iter: usize,

    /// Seed for hyperparameter restarts.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Treat solver non-convergence as fatal (exit 3).
    #[arg(long)]
    pub strict: bool,

    /// Output CSV of per-unit weights.
    #[arg(long)]
    pub output: PathBuf,

    /// Diagnostics JSON path (default: `<output stem>.diagnostics.json`).
    #[arg(long)]
    pub diagnostics: Option<PathBuf>,
}

fn default_diagnostics_path(output: &Path) -> PathBuf {
    let stem = output
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "weights".to_string());
    output.with_file_name(format!("{stem}.diagnostics.json"))
}

fn weights_csv(data: &Dataset, w: &DVector<f64>) -> String {
    let mut out = String::from("unit_id,treatment,weight\n");
    for i in 0..data.n() {
        out.push_str(&format!("{},{},{}\n", data.unit_ids[i], data.t[i], w[i]));
    }
    out
}

/// CLI-level options for solving the kernel weighting problem; shared by
/// `weights` and `estimate`.
struct KomRequest {
    kernel: Option<KernelArg>,
    degree: u32,
    sigma: SigmaChoice,
    gamma: Option<f64>,
    theta: Option<f64>,
    tol: f64,
    max_iter: usize,
    seed: u64,
}

fn solve_kom(
    data: &Dataset,
    io: &InputArgs,
    req: &KomRequest,
) -> Result<(WeightSolution, KomDiagnostics)> {
    let KomRequest {
        kernel,
        degree,
        sigma,
        gamma,
        theta,
        tol,
        max_iter,
        seed,
    } = *req;
    let spec = kernel_spec(kernel, degree)?;
    let view = data.studentize(Standardize::Full)?;
    let (mut config, tune_out, sigma_out) = match sigma {
        SigmaChoice::Gp => {
            io.require_outcome(data)?;
            let opts = TuneOptions {
                seed,
                ..TuneOptions::default()
            };
            let tuned = gp::tune(data, &view, spec, &opts)?;
            let config = KomConfig::from_tune(spec, &tuned);
            (config, Some(TuneOut::from(&tuned)), SigmaOut::Gp)
        }
        SigmaChoice::Homoskedastic(v) => {
            let gamma = gamma.unwrap_or(1.0);
            let theta = theta.unwrap_or(1.0 / data.p() as f64);
            let lambda = v.max(1e-12).sqrt();
            let hp = Hyperparams::from_values(gamma, theta, lambda)?;
            (
                KomConfig::homoskedastic(spec, hp, v),
                None,
                SigmaOut::Homoskedastic { value: v },
            )
        }
    };
    config.tol = tol;
    config.max_iter = max_iter;
    let solution = kom_weights(data, &view, &config)?;
    let diagnostics = KomDiagnostics {
        method: "kom".to_string(),
        kernel: spec,
        standardize: "full".to_string(),
        sigma: sigma_out,
        params_treated: (&config.params_treated).into(),
        params_control: (&config.params_control).into(),
        objective: solution.objective,
        delta1_sq: solution.delta1_sq,
        delta0_sq: solution.delta0_sq,
        variance_term: solution.variance_term,
        solver_objective: solution.solver_objective,
        constant: solution.constant,
        solver: SolverOut {
            kkt_residual: solution.solver_info.kkt_residual,
            iterations: solution.solver_info.iterations,
            converged: solution.solver_info.converged,
            psd_shift: solution.solver_info.psd_shift,
        },
        tune: tune_out,
        warnings: solution.warnings.clone(),
    };
    Ok((solution, diagnostics))
}

pub fn cmd_weights(args: WeightsArgs) -> Result<()> {
    let data = args.io.load()?;
    let diagnostics_path = args
        .diagnostics
        .clone()
        .unwrap_or_else(|| default_diagnostics_path(&args.output));

    let (w, diag_value, not_converged): (DVector<f64>, serde_json::Value, Option<String>) =
        match args.method {
            WeightMethod::Kom => {
                let (solution, diag) = solve_kom(
                    &data,
                    &args.io,
                    &KomRequest {
                        kernel: args.kernel,
                        degree: args.degree,
                        sigma: args.sigma,
                        gamma: args.gamma,
                        theta: args.theta,
                        tol: args.tol,
                        max_iter: args.max_iter,
                        seed: args.seed,
                    },
                )?;
                let flag = (!solution.solver_info.converged).then(|| {
                    format!(
                        "solver stopped after {} iterations with residual {:.3e}",
                        solution.solver_info.iterations, solution.solver_info.kkt_residual
                    )
                });
                (solution.w, serde_json::to_value(&diag)?, flag)
            }
            WeightMethod::Iptw => {
                let (w, model) = iptw_weights(&data, args.degree)?;
                let flag =
                    (!model.converged).then(|| "propensity model did not converge".to_string());
                let diag = json!({
                    "method": "iptw",
                    "degree": args.degree,
                    "converged": model.converged,
                    "separated": model.separated,
                    "iterations": model.iterations,
                });
                (w, diag, flag)
            }
            WeightMethod::Tiptw => {
                let (w, model) = iptw_weights(&data, args.degree)?;
                let wt = truncate_weights(&w, DEFAULT_TRUNCATION.0, DEFAULT_TRUNCATION.1)?;
                let flag =
                    (!model.converged).then(|| "propensity model did not converge".to_string());
                let diag = json!({
                    "method": "tiptw",
                    "degree": args.degree,
                    "converged": model.converged,
                    "separated": model.separated,
                    "iterations": model.iterations,
                    "truncation_percentiles": [DEFAULT_TRUNCATION.0, DEFAULT_TRUNCATION.1],
                });
                (wt, diag, flag)
            }
            WeightMethod::Sbw => {
                let r = sbw_weights(&data, args.degree, &SBW_TOL_GRID)?;
                let diag = json!({
                    "method": "sbw",
                    "degree": args.degree,
                    "tol_treated": r.tol_treated,
                    "tol_control": r.tol_control,
                    "max_violation_treated": r.max_violation_treated,
                    "max_violation_control": r.max_violation_control,
                });
                (r.w, diag, None)
            }
        };

    let snapshot = json!({
        "input": args.io.input.display().to_string(),
        "treatment_col": args.io.treatment_col,
        "outcome_col": args.io.outcome_col,
        "covariate_cols": args.io.covariate_cols,
        "method": format!("{:?}", args.method).to_lowercase(),
        "degree": args.degree,
        "sigma": sigma_label(args.sigma),
        "tol": args.tol,
        "max_iter": args.max_iter,
        "strict": args.strict,
    });
    let mut ctx = RunContext::new("weights", Some(args.seed), snapshot);
    ctx.record_input(&args.io.input)?;

    write_atomic(&args.output, weights_csv(&data, &w).as_bytes())?;
    ctx.write_manifest_for(&args.output)?;
    let diag_text = serde_json::to_string_pretty(&diag_value)? + "\n";
    write_atomic(&diagnostics_path, diag_text.as_bytes())?;
    ctx.write_manifest_for(&diagnostics_path)?;
    println!(
        "wrote {} weights to {} (diagnostics: {})",
        data.n(),
        args.output.display(),
        diagnostics_path.display()
    );

    if let Some(msg) = not_converged {
        if args.strict {
            return Err(Error::NoConvergence(msg).into());
        }
        eprintln!("warning: {msg}");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// estimate
// ---------------------------------------------------------------------------

/// Effect estimators available from the command line.
#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum EstimateMethod {
    Kom,
    Iptw,
    Tiptw,
    Ra,
    Sbw,
}

impl EstimateMethod {
    fn label(self) -> &'static str {
        match self {
            EstimateMethod::Kom => "kom",
            EstimateMethod::Iptw => "iptw",
            EstimateMethod::Tiptw => "tiptw",
            EstimateMethod::Ra => "ra",
            EstimateMethod::Sbw => "sbw",
        }
    }
}

#[derive(Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub io: InputArgs,

    /// Estimation method.
    #[arg(long, value_enum)]
    pub method: EstimateMethod,

    /// Polynomial degree (kernel or design expansion).
    #[arg(long, default_value_t = 1)]
    pub degree: u32,

    /// Sweep over several degrees: an inclusive range `1..5` or a list
    /// `2,3,4`; the output then has one row per degree.
    #[arg(long, value_parser = parse_degrees)]
    pub degrees: Option<DegreeList>,

    /// Kernel family for the kernel method.
    #[arg(long, value_enum)]
    pub kernel: Option<KernelArg>,

    /// Noise variances for the kernel method.
    #[arg(long, default_value = "gp", value_parser = parse_sigma)]
    pub sigma: SigmaChoice,

    /// Kernel output scale when sigma is homoskedastic.
    #[arg(long)]
    pub gamma: Option<f64>,

    /// Kernel input scale when sigma is homoskedastic.
    #[arg(long)]
    pub theta: Option<f64>,

    /// Bootstrap draws for the regression-adjustment standard error.
    #[arg(long, default_value_t = RA_BOOTSTRAP_DRAWS)]
    pub bootstrap_draws: usize,

    /// Seed for restarts and bootstrap draws.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Treat solver non-convergence as fatal (exit 3).
    #[arg(long)]
    pub strict: bool,

    /// Write the JSON output to this file (also printed).
    #[arg(long)]
    pub output: Option<PathBuf>,
}

struct EstimateRow {
    degree: u32,
    tau_hat: f64,
    se: f64,
    ci: (f64, f64),
    diagnostics: serde_json::Value,
    not_converged: Option<String>,
}

fn estimate_at(data: &Dataset, args: &EstimateArgs, degree: u32) -> Result<EstimateRow> {
    let (est, diagnostics, not_converged) = match args.method {
        EstimateMethod::Kom => {
            let (solution, diag) = solve_kom(
                data,
                &args.io,
                &KomRequest {
                    kernel: args.kernel,
                    degree,
                    sigma: args.sigma,
                    gamma: args.gamma,
                    theta: args.theta,
                    tol: kom_core::qp::DEFAULT_TOL,
                    max_iter: kom_core::qp::DEFAULT_MAX_ITER,
                    seed: args.seed,
                },
            )?;
            let flag = (!solution.solver_info.converged)
                .then(|| "weight solver did not converge".to_string());
            let est = wls_sate(data, &solution.w)?;
            (est, serde_json::to_value(&diag)?, flag)
        }
        EstimateMethod::Iptw => {
            let (w, model) = iptw_weights(data, degree)?;
            let flag = (!model.converged).then(|| "propensity model did not converge".to_string());
            let est = wls_sate(data, &w)?;
            let diag = json!({
                "converged": model.converged,
                "separated": model.separated,
                "iterations": model.iterations,
            });
            (est, diag, flag)
        }
        EstimateMethod::Tiptw => {
            let (w, model) = iptw_weights(data, degree)?;
            let wt = truncate_weights(&w, DEFAULT_TRUNCATION.0, DEFAULT_TRUNCATION.1)?;
            let flag = (!model.converged).then(|| "propensity model did not converge".to_string());
            let est = wls_sate(data, &wt)?;
            let diag = json!({
                "converged": model.converged,
                "separated": model.separated,
                "iterations": model.iterations,
                "truncation_percentiles": [DEFAULT_TRUNCATION.0, DEFAULT_TRUNCATION.1],
            });
            (est, diag, flag)
        }
        EstimateMethod::Ra => {
            let est = regression_adjustment(data, degree, args.bootstrap_draws, args.seed)?;
            let diag = json!({ "bootstrap_draws": args.bootstrap_draws });
            (est, diag, None)
        }
        EstimateMethod::Sbw => {
            let r = sbw_weights(data, degree, &SBW_TOL_GRID)?;
            let est = wls_sate(data, &r.w)?;
            let diag = json!({
                "tol_treated": r.tol_treated,
                "tol_control": r.tol_control,
                "max_violation_treated": r.max_violation_treated,
                "max_violation_control": r.max_violation_control,
            });
            (est, diag, None)
        }
    };
    Ok(EstimateRow {
        degree,
        tau_hat: est.tau_hat,
        se: est.se,
        ci: est.ci,
        diagnostics,
        not_converged,
    })
}

fn row_json(method: EstimateMethod, row: &EstimateRow) -> serde_json::Value {
    json!({
        "method": method.label(),
        "degree": row.degree,
        "tau_hat": row.tau_hat,
        "se": row.se,
        "ci": [row.ci.0, row.ci.1],
        "diagnostics": row.diagnostics,
    })
}

pub fn cmd_estimate(args: EstimateArgs) -> Result<()> {
    let data = args.io.load()?;
    args.io.require_outcome(&data)?;

    let degrees = match &args.degrees {
        Some(list) => list.0.clone(),
        None => vec![args.degree],
    };
    let rows: Vec<EstimateRow> = degrees
        .iter()
        .map(|&d| estimate_at(&data, &args, d))
        .collect::<Result<_>>()?;

    let out = if args.degrees.is_none() {
        row_json(args.method, &rows[0])
    } else {
        json!({
            "method": args.method.label(),
            "rows": rows.iter().map(|r| row_json(args.method, r)).collect::<Vec<_>>(),
        })
    };
    let text = serde_json::to_string_pretty(&out)? + "\n";
    print!("{text}");

    if let Some(path) = &args.output {
        let snapshot = json!({
            "input": args.io.input.display().to_string(),
            "treatment_col": args.io.treatment_col,
            "outcome_col": args.io.outcome_col,
            "covariate_cols": args.io.covariate_cols,
            "method": args.method.label(),
            "degrees": degrees,
            "sigma": sigma_label(args.sigma),
            "bootstrap_draws": args.bootstrap_draws,
            "strict": args.strict,
        });
        let mut ctx = RunContext::new("estimate", Some(args.seed), snapshot);
        ctx.record_input(&args.io.input)?;
        write_atomic(path, text.as_bytes())?;
        ctx.write_manifest_for(path)?;
    }

    let flags: Vec<&String> = rows
        .iter()
        .filter_map(|r| r.not_converged.as_ref())
        .collect();
    if let Some(msg) = flags.first() {
        if args.strict {
            return Err(Error::NoConvergence((*msg).clone()).into());
        }
        for msg in flags {
            eprintln!("warning: {msg}");
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

/// Benchmark presets mirroring the study grids at desk scale.
#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Correct linear: kernel weights vs (truncated) inverse propensity.
    Figure1,
    /// Correct nonlinear: the same comparison at degree 2.
    Figure2,
    /// Increasing covariate count at a fixed strength.
    Figure3,
    /// All methods in all four scenarios at the strongest violation.
    Table1,
}

#[derive(Args)]
pub struct SimulateArgs {
    /// Output CSV path.
    #[arg(long)]
    pub output: PathBuf,

    /// TOML file mirroring these flags; explicit flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Benchmark preset; excludes the manual scenario flags.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,

    /// Scenario label (correct_linear, correct_nonlinear,
    /// misspecified_linear, misspecified_nonlinear).
    #[arg(long)]
    pub scenario: Option<String>,

    /// Comma-separated method labels, e.g. kom_d1,iptw_d1,oracle.
    #[arg(long, value_delimiter = ',')]
    pub methods: Vec<String>,

    /// Comma-separated strengths (default: seven points from 0.1 to 3).
    #[arg(long, value_delimiter = ',')]
    pub betas: Vec<f64>,

    /// Sample size per replication.
    #[arg(long)]
    pub n: Option<usize>,

    /// Covariate count.
    #[arg(long)]
    pub k: Option<usize>,

    /// True effect.
    #[arg(long)]
    pub delta: Option<f64>,

    /// Replications per cell (500 restores the full-scale runs).
    #[arg(long)]
    pub replications: Option<usize>,

    /// Root seed.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Record mean wall time per cell (breaks byte-identical reruns).
    #[arg(long)]
    pub timing: bool,

    /// Worker threads (default: machine cores; also env KOM_THREADS).
    #[arg(long)]
    pub threads: Option<usize>,

    /// Exit 3 if any replication failed.
    #[arg(long)]
    pub strict: bool,
}

/// TOML mirror of the simulate flags.
#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct SimFileConfig {
    preset: Option<String>,
    scenario: Option<String>,
    methods: Option<Vec<String>>,
    betas: Option<Vec<f64>>,
    n: Option<usize>,
    k: Option<usize>,
    delta: Option<f64>,
    replications: Option<usize>,
    seed: Option<u64>,
    timing: Option<bool>,
    threads: Option<usize>,
}

enum Plan {
    Grid(Vec<SimConfig>),
    Confounders(ConfounderStudyConfig),
}

fn parse_preset(s: &str) -> kom_core::Result<Preset> {
    match s {
        "figure1" => Ok(Preset::Figure1),
        "figure2" => Ok(Preset::Figure2),
        "figure3" => Ok(Preset::Figure3),
        "table1" => Ok(Preset::Table1),
        other => Err(Error::InvalidArgument(format!(
            "unknown preset '{other}' (expected figure1, figure2, figure3, or table1)"
        ))),
    }
}

fn coverage_table_csv(result: &SimResult) -> String {
    const COLUMNS: [&str; 7] = ["kom", "iptw", "tiptw", "psm", "ra", "cbps", "sbw"];
    let mut scenarios: Vec<&str> = Vec::new();
    for c in &result.cells {
        if !scenarios.contains(&c.scenario.as_str()) {
            scenarios.push(&c.scenario);
        }
    }
    let mut out = String::from("scenario,kom,iptw,tiptw,psm,ra,cbps,sbw\n");
    for scenario in scenarios {
        out.push_str(scenario);
        for col in COLUMNS {
            out.push(',');
            // PSM and CBPS baselines are out of scope; mark them absent.
            if col == "psm" || col == "cbps" {
                out.push_str("NA");
                continue;
            }
            let hit = result.cells.iter().find(|c| {
                c.scenario == scenario
                    && c.method
                        .rsplit_once("_d")
                        .map_or(c.method == col, |(name, _)| name == col)
            });
            match hit {
                Some(c) => out.push_str(&c.coverage.to_string()),
                None => out.push_str("NA"),
            }
        }
        out.push('\n');
    }
    out
}

pub fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let file: SimFileConfig = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("cannot read config file {}", path.display()))?;
            toml::from_str(&text).map_err(|e| {
                Error::InvalidArgument(format!("invalid config file {}: {e}", path.display()))
            })?
        }
        None => SimFileConfig::default(),
    };

    let preset = match (args.preset, &file.preset) {
        (Some(p), _) => Some(p),
        (None, Some(s)) => Some(parse_preset(s)?),
        (None, None) => None,
    };
    let replications = args.replications.or(file.replications).unwrap_or(200);
    let seed = args.seed.or(file.seed).unwrap_or(0);
    let timing = args.timing || file.timing.unwrap_or(false);
    let threads = args.threads.or(file.threads).or_else(|| {
        std::env::var("KOM_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });

    let manual_flags_used = args.scenario.is_some()
        || !args.methods.is_empty()
        || !args.betas.is_empty()
        || args.n.is_some()
        || args.k.is_some()
        || args.delta.is_some();
    if preset.is_some() && manual_flags_used {
        return Err(Error::InvalidArgument(
            "--preset cannot be combined with --scenario/--methods/--betas/--n/--k/--delta".into(),
        )
        .into());
    }

    let plan = match preset {
        Some(Preset::Figure1) => Plan::Grid(vec![SimConfig::figure1(seed, replications)]),
        Some(Preset::Figure2) => Plan::Grid(vec![SimConfig::figure2(seed, replications)]),
        Some(Preset::Figure3) => Plan::Confounders(ConfounderStudyConfig {
            replications,
            seed,
            timing,
            ..ConfounderStudyConfig::default()
        }),
        Some(Preset::Table1) => Plan::Grid(SimConfig::table1(seed, replications)),
        None => {
            let scenario_label = args
                .scenario
                .clone()
                .or_else(|| file.scenario.clone())
                .unwrap_or_else(|| "correct_linear".to_string());
            let scenario: Scenario = scenario_label.parse()?;
            let method_labels = if !args.methods.is_empty() {
                args.methods.clone()
            } else {
                file.methods.clone().unwrap_or_default()
            };
            if method_labels.is_empty() {
                return Err(Error::InvalidArgument(
                    "no methods selected: pass --methods or use a preset".into(),
                )
                .into());
            }
            let methods: Vec<Method> = method_labels
                .iter()
                .map(|s| s.parse())
                .collect::<kom_core::Result<_>>()?;
            let betas = if !args.betas.is_empty() {
                args.betas.clone()
            } else {
                file.betas
                    .clone()
                    .unwrap_or_else(SimConfig::default_beta_grid)
            };
            let mut config = SimConfig::new(scenario);
            config.beta_grid = betas;
            config.n = args.n.or(file.n).unwrap_or(200);
            config.k = args.k.or(file.k).unwrap_or(2);
            config.delta = args.delta.or(file.delta).unwrap_or(1.0);
            config.replications = replications;
            config.seed = seed;
            config.methods = methods;
            Plan::Grid(vec![config])
        }
    };

    let plan = match plan {
        Plan::Grid(mut configs) => {
            for c in &mut configs {
                c.timing = timing;
                c.validate()?;
            }
            Plan::Grid(configs)
        }
        Plan::Confounders(c) => Plan::Confounders(c),
    };

    let snapshot = match &plan {
        Plan::Grid(configs) => json!({
            "preset": preset.map(|p| format!("{p:?}").to_lowercase()),
            "grids": configs.iter().map(sim_config_json).collect::<Vec<_>>(),
            "timing": timing,
            "threads": threads,
            "strict": args.strict,
        }),
        Plan::Confounders(c) => json!({
            "preset": "figure3",
            "k_grid": c.k_grid,
            "beta": c.beta,
            "n": c.n,
            "delta": c.delta,
            "replications": c.replications,
            "methods": c.methods.iter().map(Method::label).collect::<Vec<_>>(),
            "timing": c.timing,
            "threads": threads,
            "strict": args.strict,
        }),
    };
    let mut ctx = RunContext::new("simulate", Some(seed), snapshot);
    if let Some(path) = &args.config {
        ctx.record_input(path)?;
    }

    let pool = {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = threads {
            builder = builder.num_threads(n);
        }
        builder
            .build()
            .map_err(|e| Error::InvalidArgument(format!("cannot build thread pool: {e}")))?
    };
    let result: SimResult = pool.install(|| -> kom_core::Result<SimResult> {
        match &plan {
            Plan::Grid(configs) => {
                let mut cells = Vec::new();
                for c in configs {
                    cells.extend(run_sim(c)?.cells);
                }
                Ok(SimResult { cells })
            }
            Plan::Confounders(c) => increasing_confounders_study(c),
        }
    })?;

    write_atomic(&args.output, result.to_csv_string()?.as_bytes())?;
    ctx.write_manifest_for(&args.output)?;
    let mut written = vec![args.output.display().to_string()];

    if preset == Some(Preset::Table1) {
        let stem = args
            .output
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "table1".to_string());
        let coverage_path = args.output.with_file_name(format!("{stem}_coverage.csv"));
        write_atomic(&coverage_path, coverage_table_csv(&result).as_bytes())?;
        ctx.write_manifest_for(&coverage_path)?;
        written.push(coverage_path.display().to_string());
    }

    let failures: usize = result.cells.iter().map(|c| c.failures).sum();
    println!(
        "wrote {} rows to {} ({} replication failure(s))",
        result.cells.len(),
        written.join(", "),
        failures
    );
    if args.strict && failures > 0 {
        return Err(
            Error::Numerical(format!("{failures} replication(s) failed under --strict")).into(),
        );
    }
    Ok(())
}

fn sim_config_json(c: &SimConfig) -> serde_json::Value {
    json!({
        "scenario": c.scenario.label(),
        "beta_grid": c.beta_grid,
        "n": c.n,
        "k": c.k,
        "delta": c.delta,
        "replications": c.replications,
        "seed": c.seed,
        "methods": c.methods.iter().map(Method::label).collect::<Vec<_>>(),
        "timing": c.timing,
    })
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub io: InputArgs,

    /// Weights CSV produced by the `weights` subcommand.
    #[arg(long)]
    pub weights: PathBuf,

    /// Diagnostics JSON produced by the `weights` subcommand.
    #[arg(long)]
    pub diagnostics: PathBuf,

    /// Relative tolerance for each recomputed quantity.
    #[arg(long, default_value_t = 1e-8)]
    pub tolerance: f64,
}

fn read_weights_csv(path: &Path, data: &Dataset) -> Result<DVector<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("cannot read weights file {}", path.display()))?;
    let headers = reader.headers().map_err(|e| Error::Csv(e.to_string()))?;
    let expected = ["unit_id", "treatment", "weight"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::InvalidData(format!(
            "weights file header must be {}, got {}",
            expected.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        ))
        .into());
    }
    let mut w = DVector::zeros(data.n());
    let mut rows = 0usize;
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Csv(e.to_string()))?;
        if i >= data.n() {
            return Err(Error::InvalidData(format!(
                "weights file has more rows than the dataset ({})",
                data.n()
            ))
            .into());
        }
        let id = record.get(0).unwrap_or("");
        if id != data.unit_ids[i] {
            return Err(Error::InvalidData(format!(
                "weights row {} is for unit '{}' but the dataset row is '{}'",
                i + 1,
                id,
                data.unit_ids[i]
            ))
            .into());
        }
        w[i] = record
            .get(2)
            .unwrap_or("")
            .parse()
            .map_err(|_| Error::Csv(format!("row {}: bad weight value", i + 2)))?;
        rows += 1;
    }
    if rows != data.n() {
        return Err(Error::InvalidData(format!(
            "weights file has {rows} rows but the dataset has {}",
            data.n()
        ))
        .into());
    }
    Ok(w)
}

pub fn cmd_verify(args: VerifyArgs) -> Result<()> {
    let text = fs::read_to_string(&args.diagnostics)
        .with_context(|| format!("cannot read {}", args.diagnostics.display()))?;
    let diag: KomDiagnostics = serde_json::from_str(&text)
        .map_err(|e| Error::InvalidData(format!("cannot parse diagnostics: {e}")))?;
    if diag.method != "kom" {
        return Err(Error::InvalidArgument(format!(
            "verify supports kernel weighting diagnostics only, got method '{}'",
            diag.method
        ))
        .into());
    }
    let data = args.io.load()?;
    let w = read_weights_csv(&args.weights, &data)?;

    for arm in [1u8, 0u8] {
        let sum: f64 = data.arm_indices(arm).iter().map(|&i| w[i]).sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(
                Error::Numerical(format!("arm {arm} weights sum to {sum}, expected 1")).into(),
            );
        }
    }

    let mode = match diag.standardize.as_str() {
        "full" => Standardize::Full,
        "diagonal" => Standardize::Diagonal,
        other => {
            return Err(Error::InvalidData(format!(
                "diagnostics specify unknown standardize mode '{other}'"
            ))
            .into())
        }
    };
    let view = data.studentize(mode)?;
    let hp1 = diag.params_treated.to_hyperparams();
    let hp0 = diag.params_control.to_hyperparams();
    let k1 = gram(diag.kernel, &hp1, &view.z)?;
    let k0 = gram(diag.kernel, &hp0, &view.z)?;
    let d1 = worst_case_discrepancy_sq(k1.matrix(), &w, &data.t, 1)?;
    let d0 = worst_case_discrepancy_sq(k0.matrix(), &w, &data.t, 0)?;
    let variance: f64 = (0..data.n())
        .map(|i| {
            let s2 = match diag.sigma {
                SigmaOut::Gp => {
                    if data.t[i] == 1 {
                        hp1.sigma2()
                    } else {
                        hp0.sigma2()
                    }
                }
                SigmaOut::Homoskedastic { value } => value,
            };
            w[i] * w[i] * s2
        })
        .sum();
    let objective = d1 + d0 + variance;

    let checks = [
        ("delta1_sq", d1, diag.delta1_sq),
        ("delta0_sq", d0, diag.delta0_sq),
        ("variance_term", variance, diag.variance_term),
        ("objective", objective, diag.objective),
    ];
    for (name, got, reported) in checks {
        let tol = args.tolerance * (1.0 + reported.abs());
        // The comparison is written so that a NaN on either side fails.
        let within = (got - reported).abs() <= tol;
        if !within {
            return Err(Error::Numerical(format!(
                "{name} mismatch: diagnostics say {reported}, recomputed {got} \
                 (tolerance {tol:.3e})"
            ))
            .into());
        }
    }
    println!(
        "verified: objective {objective} and its decomposition match the diagnostics \
         within relative tolerance {:e}",
        args.tolerance
    );
    Ok(())
}
