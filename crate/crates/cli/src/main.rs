use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "tpatch", version, about = "t-patch point cloud action recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Generate a synthetic dataset into train/, val/ and test/ under --out.
    Gen,
    /// Extract t-patches from one clip and report collapse statistics.
    Extract,
    /// Train a model on the dataset in `data.dir`.
    Train,
    /// Evaluate a checkpoint on the test split.
    Eval,
    /// Export per-point GradCAM scores for one clip.
    Saliency,
    /// Finite-difference gradient checks of every layer and the full model.
    Gradcheck,
    /// Time extraction, feature and classifier stages.
    Bench,
}

/// Exit codes by failure kind.
mod exit {
    pub const CONFIG: u8 = 3;
    pub const IO: u8 = 4;
    pub const FORMAT: u8 = 5;
    pub const SHAPE: u8 = 6;
    pub const ARGUMENT: u8 = 7;
    pub const GRADCHECK: u8 = 8;
    pub const OTHER: u8 = 1;
}

fn code(err: &anyhow::Error) -> u8 {
    use tpatch_core::Error as E;
    if err.downcast_ref::<commands::GradCheckFailed>().is_some() {
        return exit::GRADCHECK;
    }
    match err.downcast_ref::<E>() {
        Some(E::Config(_)) => exit::CONFIG,
        Some(E::Io(_)) => exit::IO,
        Some(E::Format(_) | E::Truncated(_) | E::Validation(_)) => exit::FORMAT,
        Some(E::Shape(_)) => exit::SHAPE,
        Some(E::Argument(_) | E::Precondition(_)) => exit::ARGUMENT,
        None if err.downcast_ref::<std::io::Error>().is_some() => exit::IO,
        None => exit::OTHER,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let run = commands::Run::setup(cli.config.as_deref(), cli.seed, &cli.out).and_then(|run| match cli.command {
        Command::Gen => run.gen(),
        Command::Extract => run.extract(),
        Command::Train => run.train(),
        Command::Eval => run.eval(),
        Command::Saliency => run.saliency(),
        Command::Gradcheck => run.gradcheck(),
        Command::Bench => run.bench(),
    });
    match run {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::from(code(&e))
        }
    }
}
