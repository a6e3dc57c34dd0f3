mod commands;
mod flags;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use flags::ConfigFlags;

/// Toy-world pipeline for the cross-view masked diffusion transformer:
/// data generation, training, sampling, evaluation and benchmarking.
#[derive(Parser)]
#[command(name = "xmdpt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
pub struct Common {
    /// Run configuration file (sectioned key = value text).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    flags: ConfigFlags,
}

#[derive(Subcommand)]
enum Command {
    /// Render the toy corpus and its manifest into the data directory.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model on the corpus in the data directory.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate targets for test pairs with the EMA weights.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of test pairs to generate (in manifest order).
        #[arg(short, long, default_value_t = 8)]
        n: usize,
        /// Sampler seed.
        #[arg(long, default_value_t = 0)]
        sample_seed: u64,
    },
    /// Score generated targets (or the ground truth) on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Omit to score the ground truth against itself.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(short, long)]
        n: Option<usize>,
        #[arg(long, default_value_t = 0)]
        sample_seed: u64,
    },
    /// Time 8-image generation and report forward and parameter counts.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        reps: usize,
        #[arg(long, default_value_t = 8)]
        images: usize,
    },
    /// Train and validate one model per value of an ablation axis.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// mask-ratio, predictor or conditions
        #[arg(long)]
        axis: commands::Axis,
        /// Comma-separated values; defaults to the axis' standard grid.
        #[arg(long)]
        values: Option<String>,
        /// Validation examples per model.
        #[arg(long, default_value_t = 256)]
        val_examples: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { common } => commands::gen_data(&common),
        Command::Train { common, resume } => commands::train(&common, resume.as_deref()),
        Command::Sample { common, checkpoint, n, sample_seed } => commands::sample(&common, &checkpoint, n, sample_seed),
        Command::Eval { common, checkpoint, n, sample_seed } => commands::eval(&common, checkpoint.as_deref(), n, sample_seed),
        Command::Bench { common, checkpoint, reps, images } => commands::bench(&common, checkpoint.as_deref(), reps, images),
        Command::Ablate { common, axis, values, val_examples } => commands::ablate(&common, axis, values.as_deref(), val_examples),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
