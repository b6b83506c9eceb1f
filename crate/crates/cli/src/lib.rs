//! Command-line driver: train, compress, infer, evaluate, sweep, ablate and
//! gradient-check, each writing into its own run directory.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod rundir;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] memcom::Error),
    #[error("{0}")]
    Usage(String),
    #[error("gradient check failed: {0}")]
    Gradcheck(String),
}

impl CliError {
    /// 0 success, 1 usage or config, 2 numeric, 3 I/O or corruption.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Gradcheck(_) => 2,
            CliError::Core(e) if e.is_numeric() => 2,
            CliError::Core(e) if e.is_io() => 3,
            CliError::Core(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "memcom", version, about = "Memory-token prompt compression experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Configuration and output location shared by commands that write a run.
#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Flat `key = value` configuration file; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set model.n_layers=2`. Applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Run directory, relative to $MEMCOM_RUN_ROOT (default `runs`).
    #[arg(long)]
    pub run: PathBuf,
    /// Replace an existing run directory.
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain the base model (phase 0) or train a compressor (phase 1, 2).
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_parser = clap::value_parser!(u8).range(0..=2))]
        phase: u8,
        /// Checkpoint to continue from: same phase with optimizer state, or
        /// a phase-1 compressor when starting phase 2.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Pretrained target checkpoint for a new compressor.
        #[arg(long)]
        target: Option<PathBuf>,
    },
    /// Compress a token prompt file into a context cache.
    Compress {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Whitespace-separated token ids.
        #[arg(long)]
        prompt: PathBuf,
        /// Cache file name under the run's `caches/`.
        #[arg(long, default_value = "context.mcc")]
        out: String,
    },
    /// Score candidate labels for a query against a cached context.
    Infer {
        /// Any checkpoint carrying the target; only the target is used.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cache: PathBuf,
        /// Whitespace-separated query token ids.
        #[arg(long)]
        query: PathBuf,
        /// One candidate label per line, as token ids.
        #[arg(long)]
        labels: PathBuf,
    },
    /// Evaluate the configured method on the configured task.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        target: Option<PathBuf>,
        /// Trained compressor checkpoint for compressed methods.
        #[arg(long)]
        system: Option<PathBuf>,
    },
    /// Accuracy over methods, ratios and seeds.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        target: Option<PathBuf>,
        /// Compressor checkpoints to draw from; cells without one are absent.
        #[arg(long = "system")]
        systems: Vec<PathBuf>,
    },
    /// Train each cross-attention variant through phase 1 and compare.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        target: Option<PathBuf>,
    },
    /// Finite-difference check of a fresh system's gradients, in f64.
    Gradcheck {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Validate a context cache and print its header.
    InspectCache { path: PathBuf },
}

/// Parse `args` and run; returns the process exit code.
pub fn main_with<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match commands::run(cli.command) {
        Ok(out) => {
            println!("{out}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
