//! `ickd`: train teachers, distill students and run the experiment harnesses.
//!
//! Exit codes: 0 success, 1 failure (including failed verification),
//! 2 configuration or input-format error, 3 numeric instability,
//! 4 missing input file.

mod commands;
mod config;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "ickd", version, about = "In-context knowledge distillation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Configuration file (`section.key = value` lines).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override a configuration key; repeatable, applied in order.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Shorthand for `--set train.seed=N`.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Only print errors.
    #[arg(short, long, global = true)]
    quiet: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a network with plain cross-entropy.
    TrainTeacher,
    /// Offline distillation from a frozen teacher.
    Distill,
    /// Two students distilling from each other.
    Online {
        /// Compare against solo training over `experiment.seeds`.
        #[arg(long)]
        compare: bool,
    },
    /// Distill a student from a trained copy of itself.
    TeacherFree {
        /// Compare against the baseline over `experiment.seeds`.
        #[arg(long)]
        compare: bool,
    },
    /// Ablation table over `experiment.rows` and `experiment.seeds`.
    Ablate,
    /// Run the invariant battery.
    Verify {
        #[arg(long, hide = true, value_name = "FAULT")]
        inject_fault: Option<String>,
    },
    /// Long-format plot data from metrics files, or hyperparameter sweeps.
    Plotdata {
        metrics: Vec<PathBuf>,
        /// Run the sweeps in `experiment.sweep_axes` instead of reading metrics.
        #[arg(long)]
        sweep: bool,
    },
    /// Print the resolved configuration.
    ShowConfig,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(#[from] config::ConfigError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{0}")]
    Format(String),
    #[error("missing input: {0}")]
    Missing(String),
    #[error("{0}")]
    Core(#[from] ickd::Error),
    #[error("{0}")]
    Io(String),
    #[error("verification failed: {0}")]
    VerifyFailed(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::InvalidConfig(_) | CliError::Format(_) => 2,
            CliError::Core(ickd::Error::NumericInstability(_)) => 3,
            CliError::Missing(_) => 4,
            _ => 1,
        }
    }
}

impl From<ickd::train::TrainError> for CliError {
    fn from(e: ickd::train::TrainError) -> Self {
        CliError::Core(e.source)
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn read_input(path: &Path) -> Result<Vec<u8>, CliError> {
    if !path.is_file() {
        return Err(CliError::Missing(path.display().to_string()));
    }
    std::fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
