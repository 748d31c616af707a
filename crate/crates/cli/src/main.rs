//! Experiment harness: generate synthetic datasets, train models, evaluate
//! them under attack suites, and render reports.

mod cmds;
mod config;
mod plot;

use clap::{Parser, Subcommand};
use config::ExperimentConfig;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "zistorm",
    about = "Adversarial training and minority-class enhancement for spatiotemporal graph regression",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic zero-inflated dataset directory.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Output root; overrides the config's out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override every seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model (and reweighter, in mingre mode).
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue a previous training run directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on clean data and under the configured attacks.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Training run directory holding checkpoint/ (and reweighter/).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluate even when the config hash does not match the run.
        #[arg(long)]
        force: bool,
    },
    /// Render plots and CSV data files from an evaluation bundle.
    Report {
        /// Evaluation run directory or results.json path.
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(
    path: &PathBuf,
    out: Option<PathBuf>,
    seed: Option<u64>,
) -> Result<ExperimentConfig, zistorm_core::Error> {
    let mut cfg = ExperimentConfig::load(path)?.with_seed_override(seed);
    if let Some(out) = out {
        cfg.out_dir = out;
    }
    Ok(cfg)
}

fn run() -> Result<(), zistorm_core::Error> {
    match Cli::parse().command {
        Command::Generate { config, out, seed } => {
            cmds::cmd_generate(&load_config(&config, out, seed)?)?;
        }
        Command::Train {
            config,
            out,
            seed,
            resume,
        } => {
            cmds::cmd_train(&load_config(&config, out, seed)?, resume.as_deref())?;
        }
        Command::Evaluate {
            config,
            out,
            seed,
            checkpoint,
            force,
        } => {
            cmds::cmd_evaluate(&load_config(&config, out, seed)?, &checkpoint, force)?;
        }
        Command::Report { bundle, out } => {
            cmds::cmd_report(&bundle, out.as_deref())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
