//! `rfkd`: synthesize data, corrupt images, train a teacher, distill a
//! student, evaluate, sweep noise levels and build reports.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::builder::{PossibleValuesParser, TypedValueParser};
use clap::{Args, Parser, Subcommand};
use rfkd::corruption::NoiseKind;

/// Failure classes, mapped to exit codes 2 and 1.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<rfkd::Error> for Failure {
    fn from(e: rfkd::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

const KINDS: [&str; 4] = ["salt", "pepper", "gaussian_blur", "crack_texture"];
const ARCHS: [&str; 3] = ["pct", "pooling_crack", "unet_resnet18"];
const STRATEGIES: [&str; 5] = ["rfkd", "nkd", "cwd", "dist", "scratch"];
const SPLITS: [&str; 2] = ["train", "eval"];

fn kind_parser() -> impl clap::builder::TypedValueParser<Value = NoiseKind> {
    PossibleValuesParser::new(KINDS).map(|s| s.parse::<NoiseKind>().expect("listed kind"))
}

fn unit_interval(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

fn spatial_size(s: &str) -> Result<usize, String> {
    let v: usize = s.parse().map_err(|_| format!("{s:?} is not a positive integer"))?;
    if v > 0 && v % rfkd::models::SPATIAL_DIVISOR == 0 {
        Ok(v)
    } else {
        Err(format!("{v} must be a positive multiple of {}", rfkd::models::SPATIAL_DIVISOR))
    }
}

#[derive(Debug, Parser)]
#[command(name = "rfkd", version, about = "Robust feature distillation for crack segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a procedural crack dataset (images, masks, manifest.json).
    Synth(SynthArgs),
    /// Apply one corruption to one image.
    Corrupt(CorruptArgs),
    /// Train a teacher network on clean training images with the Dice loss.
    TrainTeacher(TrainArgs),
    /// Train a student under a distillation strategy.
    Distill(DistillArgs),
    /// Score a checkpoint on clean images.
    Eval(EvalArgs),
    /// Score a checkpoint under every noise kind and intensity.
    Sweep(SweepArgs),
    /// Collect run directories into results.json, sweep.csv and plots.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of image/mask pairs.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub n: u64,
    /// Side length in pixels (multiple of 32).
    #[arg(long, default_value = "64", value_parser = spatial_size)]
    pub size: usize,
    /// How many of the last pairs form the eval split.
    #[arg(long, default_value_t = 0)]
    pub eval_count: usize,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    /// RNG seed; falls back to RFKD_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct CorruptArgs {
    /// Input PNG.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output PNG.
    #[arg(long)]
    pub out: PathBuf,
    /// Noise kind.
    #[arg(long, value_parser = kind_parser())]
    pub kind: NoiseKind,
    /// Intensity in [0, 1]; see the report for per-kind meaning.
    #[arg(long, value_parser = unit_interval)]
    pub intensity: f64,
    /// RNG seed; falls back to RFKD_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Flags shared by both training commands.
#[derive(Debug, Args)]
pub struct TrainFlags {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory or manifest.json.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Architecture with its default configuration (overrides "model").
    #[arg(long, value_parser = PossibleValuesParser::new(ARCHS))]
    pub model: Option<String>,
    /// RNG seed; falls back to the config, then RFKD_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Maximum optimiser steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Maximum epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Batch size.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Disable flip and jitter augmentation.
    #[arg(long)]
    pub no_augment: bool,
    /// Stop after the first epoch whose hard train Dice reaches this value.
    #[arg(long, value_parser = unit_interval)]
    pub stop_at_dice: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    #[command(flatten)]
    pub flags: TrainFlags,
    /// Teacher checkpoint file or training run directory.
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    /// Distillation strategy.
    #[arg(long, value_parser = PossibleValuesParser::new(STRATEGIES))]
    pub strategy: Option<String>,
    /// Softening temperature (defaults per strategy).
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Train on the clean split only, without corrupted copies.
    #[arg(long)]
    pub clean_only: bool,
}

/// Flags shared by evaluation commands.
#[derive(Debug, Args)]
pub struct EvalFlags {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint file or training run directory.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Dataset directory or manifest.json.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Which split to score.
    #[arg(long, value_parser = PossibleValuesParser::new(SPLITS))]
    pub split: Option<String>,
    /// Binarisation threshold on sigmoid probabilities.
    #[arg(long, value_parser = unit_interval)]
    pub threshold: Option<f64>,
    /// Model label used in reports.
    #[arg(long)]
    pub name: Option<String>,
    /// RNG seed for corruptions; falls back to the config, then RFKD_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub flags: EvalFlags,
    /// Timed forward passes for the latency figure (0 skips, else at least 10).
    #[arg(long)]
    pub timing_reps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub flags: EvalFlags,
    /// Comma-separated noise kinds.
    #[arg(long, value_delimiter = ',', value_parser = kind_parser())]
    pub kinds: Option<Vec<NoiseKind>>,
    /// Comma-separated intensities in [0, 1].
    #[arg(long, value_delimiter = ',', value_parser = unit_interval)]
    pub intensities: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories holding records.json and/or train_log.jsonl.
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Corrupt(a) => commands::corrupt(a),
        Command::TrainTeacher(a) => commands::train_teacher(a),
        Command::Distill(a) => commands::distill(a),
        Command::Eval(a) => commands::eval(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
