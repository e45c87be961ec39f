//! The `cdyn` command line: generate, train, predict, evaluate, gradcheck, diagnose.
//!
//! Every command returns an [`Outcome`]; exit code 0 is success, 1 a
//! validation error (bad input, failed check) and 2 a runtime failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

mod commands;

#[derive(Debug, Parser)]
#[command(name = "cdyn", version, about = "Latent dynamics under perturbations: synthetic data, training and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a synthetic dataset with ground-truth latents
    Generate(GenerateArgs),
    /// Fit the model to a snapshot dataset
    Train(TrainArgs),
    /// Roll a condition forward and decode predicted cells
    Predict(PredictArgs),
    /// Leave-one-condition-out evaluation, plus latent recovery when truth exists
    Evaluate(EvaluateArgs),
    /// Compare analytic gradients of the loss with finite differences
    Gradcheck(GradcheckArgs),
    /// Score-difference block norms of a model or of the true generator
    Diagnose(DiagnoseArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// synthetic-data config (JSON); missing fields take defaults
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// draw every snapshot from independent trajectories
    #[arg(long)]
    pub unpaired: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// cells per (environment, time)
    #[arg(long)]
    pub cells: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// run config (JSON); flags win over file values
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "none")]
    pub ablate: String,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// also train one model per leave-one-out fold
    #[arg(long)]
    pub loo: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// model.json or the training output directory
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub condition: String,
    /// comma-separated targets for a condition the model never saw
    #[arg(long)]
    pub targets: Option<String>,
    #[arg(long, allow_negative_numbers = true)]
    pub horizon: i64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["model", "pred"])))]
pub struct EvaluateArgs {
    /// training output directory or model.json; per-fold models are used when present
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// predicted snapshot table to score instead of a model
    #[arg(long)]
    pub pred: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// fold specification (JSON list); built from the data when absent
    #[arg(long)]
    pub folds: Option<PathBuf>,
    /// DE top-count (clamped below the gene count)
    #[arg(long = "K")]
    pub k: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// cells used for latent recovery metrics
    #[arg(long, default_value_t = 4000)]
    pub recovery_cells: usize,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// gradient-check config (JSON)
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// corrupt a backward rule (tests only)
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("law").required(true).args(["model", "generator"])))]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// use the true generator stored with a synthetic dataset
    #[arg(long)]
    pub generator: bool,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// sample pairs per environment
    #[arg(long, default_value_t = 200)]
    pub per_env: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Validation(_) => "validation",
            CliError::Runtime(_) => "runtime",
        }
    }
}

impl From<cdyn_core::Error> for CliError {
    fn from(e: cdyn_core::Error) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

/// Exit code plus every file a command wrote.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Outcome {
    pub code: i32,
    pub reports: Vec<PathBuf>,
}

#[derive(Serialize)]
struct ErrorLine<'a> {
    level: &'static str,
    kind: &'static str,
    exit_code: i32,
    message: &'a str,
}

/// Parses `args` (program name first) and runs the command. Human summaries
/// go to `out`; a failure writes one JSON line to `err`.
pub fn run<I, T>(args: I, env_seed: Option<String>, out: &mut dyn Write, err: &mut dyn Write) -> Outcome
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return Outcome::default();
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            return fail(CliError::Validation(first.to_string()), err);
        }
    };
    let ctx = commands::Ctx {
        env_seed: env_seed.as_deref(),
        out,
    };
    match commands::dispatch(cli.command, ctx) {
        Ok(reports) => Outcome { code: 0, reports },
        Err(e) => fail(e, err),
    }
}

fn fail(e: CliError, err: &mut dyn Write) -> Outcome {
    let msg = e.to_string();
    let line = ErrorLine {
        level: "error",
        kind: e.kind(),
        exit_code: e.code(),
        message: &msg,
    };
    let _ = writeln!(err, "{}", serde_json::to_string(&line).unwrap_or_else(|_| msg.clone()));
    Outcome {
        code: e.code(),
        reports: vec![],
    }
}
