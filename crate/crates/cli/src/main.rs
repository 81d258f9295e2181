use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod output;

/// Feature-magnitude quality scoring: training, verification and the
/// downstream tools built on the learned score.
#[derive(Parser, Debug)]
#[command(name = "gacl", version, arg_required_else_help = true)]
pub struct Cli {
    /// Seed for every random choice made by the command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Directory that relative output paths are resolved against.
    #[arg(long, global = true, env = "GACL_OUT_DIR", default_value = ".")]
    pub out_dir: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a scorer on a JSONL dataset and write a checkpoint.
    Train(TrainArgs),
    /// Check the loss constraints and gradients of head presets.
    Verify(VerifyArgs),
    /// Score every sample: `id,q,theta,verdict`.
    Score(ScoreArgs),
    /// Samples in descending quality: `rank,id,q,theta`.
    Rank(ScoreArgs),
    /// Compare two samples of a dataset by quality.
    Pair(PairArgs),
    /// Flag likely label noise: `id,q,theta,verdict`.
    Cleanse(CleanseArgs),
    /// Find strokes that lower a sketch's quality.
    Attribute(AttributeArgs),
    /// Ascend the quality score in the latent space of a toy sketch VAE.
    Steer(SteerArgs),
    /// Pseudo-label run on the nine-Gaussian toy.
    Toy(ToyArgs),
    /// Write a synthetic dataset as JSONL.
    GenData(GenDataArgs),
    /// Discretise continuous ratings into class labels.
    BinRatings(BinRatingsArgs),
    /// Dump per-sample embeddings statistics or a model summary.
    Export(ExportArgs),
}

#[derive(Args, Debug)]
pub struct TrainOverrides {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Extra `key=value` settings applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Head instantiation: scale, mul, add or cos.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Train without soft binning.
    #[arg(long)]
    pub no_binning: bool,
    /// Re-cluster every this many epochs and train on the pseudo-labels.
    #[arg(long)]
    pub pseudo_label_period: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// JSONL dataset (point or sketch records).
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub overrides: TrainOverrides,
    /// Checkpoint output.
    #[arg(long, default_value = "model.json")]
    pub model: PathBuf,
    /// Per-epoch training log (CSV).
    #[arg(long, default_value = "train_log.csv")]
    pub log: PathBuf,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    /// Preset to check, or `all`.
    #[arg(long, default_value = "all")]
    pub preset: String,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 8)]
    pub feature_dim: usize,
    /// Finite-difference trials per preset; 0 skips the gradient suite.
    #[arg(long, default_value_t = 1000)]
    pub fd_trials: usize,
    /// Geometry perturbation for the co-optimisation check.
    #[arg(long, default_value_t = 1e-3)]
    pub xi: f64,
    /// Override λ_g instead of using 1.05 × its lower bound.
    #[arg(long)]
    pub lambda_g: Option<f64>,
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PairArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Id of the first sample.
    #[arg(long)]
    pub a: String,
    /// Id of the second sample.
    #[arg(long)]
    pub b: String,
}

#[derive(Args, Debug)]
pub struct CleanseArgs {
    #[command(flatten)]
    pub io: ScoreArgs,
    #[arg(long, default_value_t = 0.4)]
    pub q_hi: f64,
    #[arg(long, default_value_t = 1.5)]
    pub theta_hi: f64,
    #[arg(long, default_value_t = 0.1)]
    pub q_lo: f64,
}

#[derive(Args, Debug)]
pub struct AttributeArgs {
    #[command(flatten)]
    pub io: ScoreArgs,
    #[arg(long, default_value_t = 0.4)]
    pub q_tau: f64,
    #[arg(long, default_value_t = 0.7)]
    pub q_max: f64,
    #[arg(long, default_value_t = 0.05)]
    pub delta: f64,
}

#[derive(Args, Debug)]
pub struct SteerArgs {
    /// Sketch scorer checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    /// Step size.
    #[arg(long, default_value_t = 0.01)]
    pub lambda: f64,
    #[arg(long, default_value_t = 200)]
    pub iters: usize,
    #[arg(long, default_value_t = 50)]
    pub checkpoint_every: usize,
    /// Gumbel-softmax temperature.
    #[arg(long, default_value_t = 1.0)]
    pub tau: f64,
    #[arg(long, default_value_t = 1.0)]
    pub q_max: f64,
    /// VAE training epochs.
    #[arg(long, default_value_t = 30)]
    pub vae_epochs: usize,
    /// Sketches per class in the VAE training corpus.
    #[arg(long, default_value_t = 250)]
    pub vae_per_class: usize,
    /// Shape of the starting sketch.
    #[arg(long, default_value = "square")]
    pub class: String,
    /// Distortion of the starting sketch.
    #[arg(long, default_value_t = 0.8)]
    pub distortion: f64,
    /// Trajectory output (JSONL).
    #[arg(long, default_value = "trajectory.jsonl")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ToyArgs {
    /// circle, grid or both.
    #[arg(long, default_value = "both")]
    pub arrangement: String,
    #[arg(long, default_value_t = 100)]
    pub samples: usize,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// gaussians or sketches.
    #[arg(long, default_value = "gaussians")]
    pub kind: String,
    #[arg(long, default_value = "circle")]
    pub arrangement: String,
    /// Samples per component or class.
    #[arg(long, default_value_t = 100)]
    pub samples: usize,
    /// Share of labels replaced by a different class.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Sketches: share drawn in the turned sub-style.
    #[arg(long, default_value_t = 0.0)]
    pub turned_share: f64,
    /// Sketches: comma-separated distortion levels cycled through instead of a uniform draw.
    #[arg(long, value_delimiter = ',')]
    pub levels: Vec<f64>,
    #[arg(long, default_value_t = 0.0)]
    pub distortion_min: f64,
    #[arg(long, default_value_t = 1.0)]
    pub distortion_max: f64,
    #[arg(long, default_value = "data.jsonl")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct BinRatingsArgs {
    /// CSV of `id,score` rows.
    #[arg(long)]
    pub ratings: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub bins: usize,
    /// equal-width or equal-frequency.
    #[arg(long, default_value = "equal-width")]
    pub policy: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// With a dataset, export one CSV row per sample; otherwise a JSON model summary.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(2),
            };
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
