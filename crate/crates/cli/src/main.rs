//! `slamp`: dataset creation, training, evaluation and visualization.
//!
//! Exit codes: 0 success, 1 other failure, 2 invalid configuration or usage,
//! 3 unwritable output path, 4 non-finite loss, 5 configuration/checkpoint
//! mismatch. Human-readable messages go to stderr, artifact paths to stdout.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use slamp::model::Variant;

#[derive(Parser)]
#[command(name = "slamp", version, about = "Stochastic video prediction with appearance and motion latents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Preset name (`smmnist-desk`, `smmnist-paper`) or TOML file.
    #[arg(long, default_value = "smmnist-desk")]
    config: String,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Validate inputs and report the plan without writing artifacts.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args, Clone)]
struct DataArg {
    /// Dataset directory written by `make-data`.
    #[arg(long, env = "SLAMP_DATA")]
    data: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a Stochastic Moving MNIST dataset.
    MakeData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model on a generated dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Model variant; overrides the config.
        #[arg(long)]
        variant: Option<Variant>,
        /// Checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Best-of-N evaluation on the test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        n_samples: Option<usize>,
    },
    /// Sample futures for one test clip and render signal grids.
    Sample {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        n_samples: Option<usize>,
        /// Index into the test split.
        #[arg(long, default_value_t = 0)]
        video: usize,
    },
    /// Render predicted flow fields of one test clip.
    VisualizeFlow {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        video: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {:#}", e.error);
            ExitCode::from(e.code)
        }
    }
}
