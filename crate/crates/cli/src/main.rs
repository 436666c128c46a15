//! `mammoclip`: the desk-scale pipeline as one subcommand-style binary.
//!
//! Exit codes: 0 success, 1 configuration error, 2 data error (including
//! partial failures), 3 numerical failure, 4 I/O error.

mod commands;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mammoclip::Error;

#[derive(Debug, Parser)]
#[command(name = "mammoclip", version, about = "Breast-density dual-encoder pipeline on synthetic phantoms")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Plain-text `key = value` run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for per-image work.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Replace an existing output directory from an earlier run.
    #[arg(long, global = true)]
    pub overwrite: bool,
    /// Parent of per-command output directories.
    #[arg(long, global = true, env = "MAMMOCLIP_RUN_DIR")]
    pub run_dir: Option<PathBuf>,
    /// Output directory (default: `<run-dir>/<command>`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    /// Separated density ranges, default intensities.
    Standard,
    /// Adjacent classes share part of their density range.
    Overlapping,
    /// Shifted intensity profile and heavier artifacts.
    Shifted,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Target {
    Similarity,
    Probability,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a phantom dataset and its manifest.
    Generate {
        /// Dataset recipe file; flags below are ignored when given.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Number of classes, taken from A upward.
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 250)]
        per_class: usize,
        #[arg(long, value_enum, default_value_t = Preset::Standard)]
        preset: Preset,
        #[arg(long, default_value = "phantoms")]
        name: String,
    },
    /// Crop, resize and normalize every image of a manifest.
    Preprocess {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Undersample, compute class weights and assign patient-grouped folds.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        /// Per-class targets `A,B,C,D`; all images are kept when omitted.
        #[arg(long)]
        targets: Option<String>,
        /// Fail when a class has fewer images than its target.
        #[arg(long)]
        strict: bool,
    },
    /// Cross-validate the dual encoder over the folds of a split.
    Train {
        /// Preprocessed manifest.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        folds: PathBuf,
        /// Train only this fold.
        #[arg(long)]
        fold: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
    },
    /// Evaluate a checkpoint on preprocessed images, or audit a split.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        /// Restrict to the validation patients of `--fold` in this split.
        #[arg(long, requires = "fold")]
        folds: Option<PathBuf>,
        #[arg(long, requires = "folds")]
        fold: Option<usize>,
        /// Check a split for leakage and stratification.
        #[arg(long)]
        audit_split: Option<PathBuf>,
    },
    /// Classify raw images from another source without retraining.
    ZeroShot {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest of raw (unprocessed) images.
        #[arg(long)]
        manifest: PathBuf,
    },
    /// GradCAM overlays for preprocessed images.
    Gradcam {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Target class letter; defaults to each image's labelled class.
        #[arg(long)]
        class: Option<String>,
        /// Only the first N records.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, value_enum)]
        target: Option<Target>,
        #[arg(long)]
        alpha: Option<f64>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Generate { .. } => "generate",
            Command::Preprocess { .. } => "preprocess",
            Command::Split { .. } => "split",
            Command::Train { .. } => "train",
            Command::Evaluate { .. } => "evaluate",
            Command::ZeroShot { .. } => "zero-shot",
            Command::Gradcam { .. } => "gradcam",
        }
    }
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Io { .. } => 4,
        _ if e.is_numerical() => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
