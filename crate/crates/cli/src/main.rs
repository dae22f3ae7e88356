//! Batch command-line driver: train, evaluate, gradcheck, paramcount,
//! synthgen, and bench subcommands over the engine.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use std::path::PathBuf;

pub use config::RunConfig;

/// CLI failure classes, mapped to distinct exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or arguments (exit 2).
    Config(String),
    /// Data or filesystem problems (exit 3).
    Data(String),
    /// Numerical failures: checks, non-finite losses (exit 4).
    Numerical(String),
    /// Everything else (exit 1).
    Other(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical error: {m}"),
            CliError::Other(m) => write!(f, "error: {m}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl From<cdsed_core::model::ModelError> for CliError {
    fn from(e: cdsed_core::model::ModelError) -> Self {
        use cdsed_core::model::ModelError as M;
        match e {
            M::Config(_) | M::EvenTimeKernel { .. } => CliError::Config(e.to_string()),
            M::Checkpoint(_) => CliError::Data(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<cdsed_core::data::DataError> for CliError {
    fn from(e: cdsed_core::data::DataError) -> Self {
        use cdsed_core::data::DataError as D;
        match e {
            D::BadGeneratorConfig(_) | D::DependencyCycle { .. } => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<cdsed_core::optim::TrainError> for CliError {
    fn from(e: cdsed_core::optim::TrainError) -> Self {
        use cdsed_core::optim::TrainError as T;
        match e {
            T::EmptySplit(_) => CliError::Data(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "cdsed", version, about = "Polyphonic sound event detection with conditioned time-dilated convolutions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run per seed and keep the best-validation checkpoints.
    Train {
        /// Feature directory (manifest.json plus DLC1 tensors).
        #[arg(long)]
        data: PathBuf,
        /// TOML run configuration; defaults are the standard setup.
        #[arg(long)]
        config: Option<PathBuf>,
        /// key=value overrides, e.g. --set dilation=10 --set kernel=7.
        #[arg(long = "set")]
        sets: Vec<String>,
        /// Output directory override.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate checkpoints on a split; aggregates over repetitions.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        /// One or more checkpoints (repetitions of the same method).
        #[arg(long = "ckpt", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value = "method")]
        label: String,
        /// Optional baseline checkpoints for the delta columns.
        #[arg(long = "baseline-ckpt")]
        baseline_checkpoints: Vec<PathBuf>,
        #[arg(long, default_value = "Base")]
        baseline_label: String,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Write the results table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Finite-difference verification of every backward pass.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// layers | heads | model | all
        #[arg(long, default_value = "all")]
        scope: String,
    },
    /// Exact parameter counts and the separable-vs-standard ratio.
    Paramcount {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set")]
        sets: Vec<String>,
    },
    /// Generate a synthetic dataset with planted temporal dependencies.
    Synthgen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// default | tiny | trend
        #[arg(long, default_value = "default")]
        preset: String,
    },
    /// Wall-clock comparison of the direct and im2col convolution paths.
    Bench {
        #[arg(long, default_value_t = 1024)]
        rows: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 7)]
        kernel: usize,
        #[arg(long, default_value_t = 10)]
        dilation: usize,
        #[arg(long = "out-channels", default_value_t = 32)]
        out_channels: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            data,
            config,
            sets,
            out,
        } => commands::train(data, config, sets, out),
        Command::Evaluate {
            data,
            checkpoints,
            split,
            label,
            baseline_checkpoints,
            baseline_label,
            threshold,
            csv,
        } => commands::evaluate(
            data,
            checkpoints,
            &split,
            &label,
            baseline_checkpoints,
            &baseline_label,
            threshold,
            csv,
        ),
        Command::Gradcheck { seed, scope } => commands::gradcheck(seed, &scope),
        Command::Paramcount { config, sets } => commands::paramcount(config, sets),
        Command::Synthgen { out, seed, preset } => commands::synthgen(out, seed, &preset),
        Command::Bench {
            rows,
            width,
            kernel,
            dilation,
            out_channels,
            reps,
        } => commands::bench(rows, width, kernel, dilation, out_channels, reps),
    };
    if let Err(e) = result {
        eprintln!("{e}");
        std::process::exit(e.exit_code());
    }
}
