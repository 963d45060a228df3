//! `electrolyte`: generate synthetic corpora, train models per seed and
//! write evaluation and perturbation reports.
//!
//! Exit codes: 0 on success, 1 for usage and input errors, 2 for internal
//! failures (divergence, numerical breakdown, crashed workers).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use electrolyte::synthdata::Split;
use electrolyte::targets::BinaryTask;

/// Environment variable with the number of worker processes for training.
pub const WORKERS_ENV: &str = "ELECTROLYTE_WORKERS";

#[derive(Parser, Debug)]
#[command(name = "electrolyte", version, about = "Electrolyte estimation from synthetic 12-lead ECGs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a corpus: manifest, record files and a copy of the config.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model per seed; completed seeds are skipped.
    Train(TrainArgs),
    /// Evaluate checkpoints on test splits.
    Eval(EvalArgs),
    /// Evaluate a Gaussian ensemble under noise and masking.
    Ood(OodArgs),
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// Corpus directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Experiment config; defaults to the copy inside the corpus directory.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// direct, gaussian, classification, ordinal or ridge.
    #[arg(long)]
    head: String,
    /// Class count for the classification and ordinal heads.
    #[arg(long)]
    classes: Option<usize>,
    /// Side of the clinical range for two classes.
    #[arg(long, value_parser = parse_task)]
    task: Option<BinaryTask>,
    /// Seed list such as `0-4` or `0,2,5`.
    #[arg(long, default_value = "0")]
    seeds: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Checkpoint files or directories holding them.
    #[arg(long, num_args = 1.., required = true)]
    checkpoints: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values = ["random-test", "temporal-test"], value_parser = parse_split)]
    split: Vec<Split>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct OodArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, num_args = 1.., required = true)]
    checkpoints: Vec<PathBuf>,
    #[arg(long, default_value = "random-test", value_parser = parse_split)]
    split: Split,
    /// Signal-to-noise ratios, comma separated.
    #[arg(long, value_delimiter = ',', default_values = ["10", "1"])]
    snr: Vec<f64>,
    /// Masked proportions, comma separated.
    #[arg(long, value_delimiter = ',', default_values = ["0.25", "0.5", "0.75"])]
    mask: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: electrolyte::Error| e.to_string())
}

fn parse_task(s: &str) -> Result<BinaryTask, String> {
    match s {
        "hypo" => Ok(BinaryTask::Hypo),
        "hyper" => Ok(BinaryTask::Hyper),
        _ => Err(format!("unknown task `{s}` (expected hypo or hyper)")),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenData { config, out } => commands::gen_data(&config, &out),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Ood(a) => commands::ood(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
