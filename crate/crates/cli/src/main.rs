//! `snd`: subject-novelty detection under background shift.
//!
//! Pipeline: `gen-data` materializes a multi-background digit dataset,
//! `train` fits the disentangled model, `score` writes per-sample novelty
//! scores, `eval` runs single-split or leave-one-class-out evaluation, and
//! `export-latents`/`plot` produce feature tables and 2-D projections.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage/validation error.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use commands::{DataArgs, UsageError};
use config::TrainFlags;

#[derive(Parser)]
#[command(name = "snd", version, about = "Subject-novelty detection under background shift")]
struct Cli {
    /// Print resolved configuration with per-key provenance.
    #[arg(long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct DataFlags {
    /// TOML config file; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed; all randomness derives from it.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    /// Class held out as novel.
    #[arg(long)]
    novel_class: Option<u8>,
    /// Fraction of the test set drawn from the novel class.
    #[arg(long)]
    novel_fraction: Option<f64>,
    /// Number of seen background colors K.
    #[arg(long)]
    k_backgrounds: Option<usize>,
    /// Digit source: synthetic (default) or idx.
    #[arg(long)]
    source: Option<String>,
    /// Directory holding MNIST IDX files (for --source idx).
    #[arg(long)]
    mnist_dir: Option<PathBuf>,
    /// Size of the synthetic digit pool.
    #[arg(long)]
    synth_pool: Option<usize>,
}

impl DataFlags {
    fn to_args(&self) -> DataArgs {
        DataArgs {
            config: self.config.clone(),
            seed: self.seed,
            n_train: self.n_train,
            n_test: self.n_test,
            novel_class: self.novel_class,
            novel_fraction: self.novel_fraction,
            k_backgrounds: self.k_backgrounds,
            source: self.source.clone(),
            mnist_dir: self.mnist_dir.clone(),
            synth_pool: self.synth_pool,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a colorized multi-background dataset directory.
    GenData {
        #[command(flatten)]
        data: DataFlags,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the model on a dataset directory.
    Train {
        /// Dataset directory from gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoint and training log.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Override the mixture component count (defaults to the palette K).
        #[arg(long)]
        k_backgrounds: Option<usize>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Score the test split of a dataset with a trained checkpoint.
    Score {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Bandwidth: median, scott, or fixed:<h>.
        #[arg(long)]
        bandwidth: Option<String>,
        /// Also score with the raw-pixel KDE control.
        #[arg(long)]
        baseline: bool,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Evaluate: single split (--data + --checkpoint) or full protocol.
    Eval {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Run the leave-one-class-out protocol (train per held-out class).
        #[arg(long)]
        protocol: bool,
        /// Comma-separated held-out classes for protocol mode.
        #[arg(long)]
        classes: Option<String>,
        /// Add the raw-pixel KDE comparison column.
        #[arg(long)]
        baseline: bool,
        /// Worker threads across protocol cells.
        #[arg(long)]
        parallel: Option<usize>,
        #[arg(long)]
        bandwidth: Option<String>,
        #[command(flatten)]
        data_flags: DataFlags,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Write per-sample latent features plus 2-D projection plots.
    ExportLatents {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Which split to export: train or test.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Re-render projection plots from an exported latents CSV.
    Plot {
        #[arg(long)]
        latents: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Color points by: class or background.
        #[arg(long, default_value = "background")]
        color_by: String,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::GenData { data, out } => commands::cmd_gen_data(&data.to_args(), out, cli.verbose),
        Command::Train {
            data,
            out,
            config,
            seed,
            k_backgrounds,
            train,
        } => commands::cmd_train(
            data,
            out,
            config.as_deref(),
            *seed,
            train,
            *k_backgrounds,
            cli.verbose,
        ),
        Command::Score {
            data,
            checkpoint,
            out,
            bandwidth,
            baseline,
            config,
        } => commands::cmd_score(
            data,
            checkpoint,
            out,
            bandwidth.as_deref(),
            *baseline,
            config.as_deref(),
        ),
        Command::Eval {
            out,
            data,
            checkpoint,
            protocol,
            classes,
            baseline,
            parallel,
            bandwidth,
            data_flags,
            train,
        } => commands::cmd_eval(
            out,
            data.as_deref(),
            checkpoint.as_deref(),
            *protocol,
            classes.as_deref(),
            *baseline,
            *parallel,
            bandwidth.as_deref(),
            &data_flags.to_args(),
            train,
            data_flags.seed,
            cli.verbose,
        ),
        Command::ExportLatents {
            data,
            checkpoint,
            out,
            split,
        } => commands::cmd_export_latents(data, checkpoint, out, split),
        Command::Plot {
            latents,
            out,
            color_by,
        } => commands::cmd_plot(latents, out, color_by),
    }
}

/// Usage/validation problems exit 2; runtime failures exit 1.
fn classify(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    if let Some(core) = err.downcast_ref::<snd_core::Error>() {
        return match core {
            snd_core::Error::Config(_)
            | snd_core::Error::Capacity(_)
            | snd_core::Error::UnknownClass(_) => 2,
            _ => 1,
        };
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(classify(&err))
        }
    }
}
