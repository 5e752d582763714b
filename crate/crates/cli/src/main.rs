//! `maskgate`: train, evaluate, trace and prune masked networks.
//!
//! Exit codes: 0 success, 2 user error (bad flags, config, paths, data),
//! 3 numeric failure (non-finite loss).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use maskgate::Error;

#[derive(Parser, Debug)]
#[command(
    name = "maskgate",
    version,
    about = "Learned linear/non-linear channel masks: train, evaluate, trace, prune"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a network and write checkpoint.mgk, trace.csv and train.log.
    Train(RunArgs),
    /// Print top-1 accuracy of a checkpoint on a dataset.
    Eval(RunArgs),
    /// Print the proportion trace stored next to a checkpoint.
    Trace(RunArgs),
    /// Prune a checkpoint with its learned masks, fine-tune, and report.
    Prune(RunArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct RunArgs {
    /// Config file with [model], [train], [prune] and [data] sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `synthetic`, `idx:<images>,<labels>` or `csv:<path>`.
    #[arg(long)]
    pub dataset: Option<String>,
    /// `mlp-m` or `convnet-m`.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (created if absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overwrite an existing checkpoint.
    #[arg(long)]
    pub force: bool,
    /// Keep branch heads fixed during training.
    #[arg(long)]
    pub freeze_branches: bool,
    /// Comma-separated block indices carrying mask modules (empty for none).
    #[arg(long)]
    pub mask_placement: Option<String>,
    /// `paper` (both mask paths pass +1) or `chain` (mask2 path passes -1).
    #[arg(long)]
    pub ste_sign_convention: Option<String>,
    /// `section.key=value` override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Checkpoint to read (eval, trace, prune).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub samples_per_class: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub separation: Option<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Trace(a) => commands::trace(&a),
        Command::Prune(a) => commands::prune(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NonFinite { .. } => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
