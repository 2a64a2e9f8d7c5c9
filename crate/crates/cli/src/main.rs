mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Multi-scale decomposition MLP-Mixer: train, evaluate, decompose, synthesize.
#[derive(Parser, Debug)]
#[command(name = "msd-mixer", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model from a run config and write its checkpoint and report.
    Train { config: PathBuf },
    /// Evaluate a checkpoint on the test split of a dataset.
    Eval {
        checkpoint: PathBuf,
        manifest: PathBuf,
        /// Task descriptor as inline JSON or a path to a JSON file; defaults to the checkpoint's task.
        #[arg(long)]
        task: Option<String>,
        /// Where to write the metric report; defaults to `metrics.json` beside the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed for imputation masks.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Decompose one input window into components and residual, with ACF diagnostics.
    Decompose {
        checkpoint: PathBuf,
        input: PathBuf,
        out_dir: PathBuf,
        /// First row of the window when the CSV is longer than the model input.
        #[arg(long)]
        start: Option<usize>,
    },
    /// Generate a synthetic series and its ground-truth parts.
    Synth { spec: PathBuf, out: PathBuf },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Core(#[from] msd_mixer::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(msd_mixer::Error::NonFinite(_)) => 3,
            _ => 2,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MSD_MIXER_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config } => commands::train(&config),
        Command::Eval {
            checkpoint,
            manifest,
            task,
            out,
            seed,
        } => commands::eval(&checkpoint, &manifest, task.as_deref(), out.as_deref(), seed),
        Command::Decompose {
            checkpoint,
            input,
            out_dir,
            start,
        } => commands::decompose(&checkpoint, &input, &out_dir, start),
        Command::Synth { spec, out } => commands::synth(&spec, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
