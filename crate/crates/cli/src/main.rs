//! `kom` — kernel optimal matching from the command line.
//!
//! Subcommands cover the full workflow: `tune` fits kernel hyperparameters
//! by marginal likelihood, `weights` solves for balancing weights, `estimate`
//! produces effect estimates with robust standard errors, `simulate` runs the
//! replicated benchmark grids, and `verify` independently recomputes the
//! diagnostics of a `weights` run.
//!
//! Exit codes: 0 on success, 2 for usage/configuration/data errors, 3 for
//! numerical failures (and for solver non-convergence under `--strict`).
//! Every output file is accompanied by a `<file>.manifest.json` recording the
//! command, configuration snapshot, seed, tool version, input digests, and
//! start/end timestamps.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use kom_core::Error;

#[derive(Parser)]
#[command(
    name = "kom",
    version,
    about = "Kernel optimal matching: balancing weights, effect estimates, and benchmarks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tune kernel hyperparameters per arm by marginal likelihood.
    Tune(commands::TuneArgs),
    /// Solve for balancing weights and write them with diagnostics.
    Weights(commands::WeightsArgs),
    /// Estimate the average treatment effect with a chosen method.
    Estimate(commands::EstimateArgs),
    /// Run replicated simulation benchmarks.
    Simulate(commands::SimulateArgs),
    /// Recompute and check the diagnostics of a weights run.
    Verify(commands::VerifyArgs),
}

/// Input CSV selection shared by the data-consuming subcommands.
#[derive(Args, Clone)]
pub struct InputArgs {
    /// Input CSV file (headered, UTF-8).
    #[arg(long)]
    pub input: PathBuf,

    /// Treatment column (0/1 coded).
    #[arg(long, default_value = "t")]
    pub treatment_col: String,

    /// Outcome column.
    #[arg(long, default_value = "y")]
    pub outcome_col: String,

    /// Covariate columns, comma separated. Defaults to every column other
    /// than the treatment, the outcome, and `unit_id`.
    #[arg(long, value_delimiter = ',')]
    pub covariate_cols: Vec<String>,
}

impl InputArgs {
    fn schema(&self) -> kom_core::data::CsvSchema {
        kom_core::data::CsvSchema {
            outcome: Some(self.outcome_col.clone()),
            treatment: self.treatment_col.clone(),
            covariates: self.covariate_cols.clone(),
        }
    }

    fn load(&self) -> kom_core::Result<kom_core::data::Dataset> {
        kom_core::data::load_csv(&self.input, &self.schema())
    }

    /// Errors (naming the column) when the loaded dataset has no outcomes.
    fn require_outcome(&self, data: &kom_core::data::Dataset) -> kom_core::Result<()> {
        if data.y.is_none() {
            return Err(Error::InvalidArgument(format!(
                "outcome column '{}' not found in {}",
                self.outcome_col,
                self.input.display()
            )));
        }
        Ok(())
    }
}

fn exit_code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::InvalidData(_) | Error::Csv(_) | Error::InvalidArgument(_) => 2,
                Error::NotPsd(_) | Error::NoConvergence(_) | Error::Numerical(_) => 3,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Tune(args) => commands::cmd_tune(args),
        Command::Weights(args) => commands::cmd_weights(args),
        Command::Estimate(args) => commands::cmd_estimate(args),
        Command::Simulate(args) => commands::cmd_simulate(args),
        Command::Verify(args) => commands::cmd_verify(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
