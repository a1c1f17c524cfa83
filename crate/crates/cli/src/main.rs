use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use minidistill_cli::config::{load_config, ExperimentConfig};
use minidistill_cli::error::CliError;
use minidistill_cli::commands;

#[derive(Parser)]
#[command(
    name = "minidistill",
    version,
    about = "Train, distill, and compare tiny grammar-world language models"
)]
struct Cli {
    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config file (lines of `section.key = value`).
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides run.out).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training seed (overrides train.seed).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a teacher model; writes teacher.ckpt, metrics.csv, summary.json.
    TrainTeacher(RunArgs),
    /// Distill a student from trained teacher checkpoint(s).
    Distill(RunArgs),
    /// Evaluate an existing checkpoint on the configured data.
    Eval {
        #[command(flatten)]
        args: RunArgs,
        /// Checkpoint to evaluate.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the objective × teacher-count comparison grid.
    Compare(RunArgs),
}

fn resolve(args: &RunArgs) -> Result<ExperimentConfig, CliError> {
    let mut cfg = load_config(&args.config)?;
    if let Some(out) = &args.out {
        cfg.out_dir = Some(out.clone());
    }
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::TrainTeacher(args) => {
            commands::cmd_train_teacher(&resolve(args)?, cli.quiet)?;
        }
        Command::Distill(args) => {
            commands::cmd_distill(&resolve(args)?, cli.quiet)?;
        }
        Command::Eval { args, checkpoint } => {
            commands::cmd_eval(&resolve(args)?, checkpoint, cli.quiet)?;
        }
        Command::Compare(args) => {
            commands::cmd_compare(&resolve(args)?, cli.quiet)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
