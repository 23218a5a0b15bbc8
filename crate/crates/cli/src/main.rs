mod commands;
mod selftest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use loca::LocaError;

/// Operator learning with kernel-coupled attention.
#[derive(Parser, Debug)]
#[command(name = "loca", version, about)]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Experiment file, or the name of a built-in preset.
    #[arg(long)]
    pub config: String,

    /// Override the experiment seed.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Output directory (default: the config's output_dir, else a directory
    /// named after the experiment under $LOCA_OUTPUT_ROOT or ./runs).
    #[arg(long)]
    pub out: Option<PathBuf>,

    /// Worker threads for data generation and evaluation.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate (or find cached) training and test datasets.
    Generate(Common),
    /// Train and evaluate; darcy-ablation trains both variants.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset cache directory (default: <out>/data).
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset file.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Directory for errors.csv, quantiles.csv and summary.json.
        #[arg(long)]
        out: PathBuf,
        /// Report squared-norm ratios.
        #[arg(long)]
        squared: bool,
        /// Add Gaussian noise of this standard deviation to the inputs first.
        #[arg(long)]
        input_noise: Option<f64>,
        /// Seed of the input noise.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Run every variant of a sweep in worker processes and aggregate.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Concurrent worker processes.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Run the fast invariant checks.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the TOML of a built-in preset.
    Preset { name: String },
}

/// Process exit codes.
pub mod exit {
    pub const FAILURE: u8 = 1;
    pub const CONFIG: u8 = 2;
    pub const DATA: u8 = 3;
    pub const NUMERIC_ABORT: u8 = 4;
    pub const PARTIAL: u8 = 5;
}

fn exit_code(e: &LocaError) -> u8 {
    match e.root() {
        LocaError::Config(_) => exit::CONFIG,
        LocaError::Data(_) | LocaError::Format { .. } | LocaError::Io { .. } | LocaError::EmptyInput(_) => exit::DATA,
        LocaError::NumericAbort { .. } | LocaError::NumericDomain(_) => exit::NUMERIC_ABORT,
        _ => exit::FAILURE,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp_secs()
        .init();
    let result = match cli.command {
        Command::Generate(c) => commands::generate(&c),
        Command::Train { common, data_dir } => commands::train(&common, data_dir),
        Command::Evaluate {
            checkpoint,
            data,
            out,
            squared,
            input_noise,
            seed,
            threads,
        } => commands::evaluate(&checkpoint, &data, &out, squared, input_noise, seed, threads),
        Command::Sweep { common, jobs } => commands::sweep(&common, jobs),
        Command::Selftest { seed } => selftest::run(seed),
        Command::Preset { name } => commands::preset(&name),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
