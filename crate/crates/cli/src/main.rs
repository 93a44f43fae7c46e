use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod report;

/// Train, adapt and evaluate multi-subject brain encoders.
#[derive(Debug, Parser)]
#[command(name = "brainalign", version)]
pub struct Cli {
    /// Directory holding default `encoder.json` and `train.json`.
    #[arg(long, global = true, env = "BRAINALIGN_CONFIG_DIR")]
    pub config_dir: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a shared encoder on the subjects of a dataset.
    Train(commands::TrainArgs),
    /// Sweep data ratios for adapting a trained encoder to a new subject.
    Adapt(commands::AdaptArgs),
    /// Compute evaluation reports.
    Eval(EvalArgs),
    /// Generate a synthetic world and write it as a dataset.
    Simulate(commands::SimulateArgs),
    /// Summarize a checkpoint, dataset manifest or feature export.
    Inspect(commands::InspectArgs),
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(subcommand)]
    pub kind: EvalKind,
}

#[derive(Debug, Subcommand)]
pub enum EvalKind {
    /// Forward, backward and exemplar retrieval on a dataset split.
    Retrieval(commands::RetrievalArgs),
    /// Box accuracy per salience category.
    Grounding(commands::GroundingArgs),
    /// Caption metrics, native or through registered scorers.
    Caption(commands::CaptionArgs),
}

/// Failure classes and their process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Failure {
    Usage = 1,
    Data = 2,
    Numeric = 3,
}

/// A bad flag value or an unusable input path.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

pub fn classify(err: &anyhow::Error) -> Failure {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return Failure::Usage;
        }
        if let Some(e) = cause.downcast_ref::<brainalign::Error>() {
            return match e {
                brainalign::Error::NonFinite { .. } => Failure::Numeric,
                brainalign::Error::Config(_) | brainalign::Error::Argument(_) => Failure::Usage,
                _ => Failure::Data,
            };
        }
    }
    Failure::Data
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(Failure::Usage as u8)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(classify(&e) as u8)
        }
    }
}
