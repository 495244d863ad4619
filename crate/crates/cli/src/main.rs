//! `signforge`: one binary driving the text-to-pose-to-video pipeline.
//!
//! Every subcommand is a pure function of its inputs and `--seed`: running
//! the same command twice writes byte-identical artifacts. Exit codes are
//! 0 on success, 1 for internal failures and 2 for bad user input.

mod cfg;
mod ops;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use signforge_core::dataprep::DEFAULT_MAX_FRAMES;
use signforge_core::frnet::{DEFAULT_OFFSET, DEFAULT_WINDOW};
use signforge_core::Error;

/// Failure classes map straight to exit codes: `User` is 2, `Internal` 1.
#[derive(Debug)]
pub enum Failure {
    User(String),
    Internal(String),
}

impl Failure {
    fn user(msg: impl Into<String>) -> Failure {
        Failure::User(msg.into())
    }

    fn internal(msg: impl Into<String>) -> Failure {
        Failure::Internal(msg.into())
    }
}

impl From<Error> for Failure {
    /// Everything a user can cause by feeding bad files or flags is `User`;
    /// diverging training and unexpected io are on us.
    fn from(e: Error) -> Failure {
        match e {
            Error::NonFiniteLoss { .. } | Error::Io(_) => Failure::Internal(e.to_string()),
            _ => Failure::User(e.to_string()),
        }
    }
}

pub type OpResult = Result<(), Failure>;

#[derive(Parser)]
#[command(
    name = "signforge",
    version,
    about = "Text to sign pose to conditioned frame pipeline",
    propagate_version = true
)]
struct Cli {
    /// Base seed for every random decision.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest 2D keypoints, lift to 3D, clean, normalise, write pose files
    /// and a serialised dataset.
    Prep(PrepArgs),
    /// Train the text-to-pose translator; one checkpoint per epoch plus a
    /// loss table.
    TrainPose(TrainPoseArgs),
    /// Decode pose sequences for each line of a text file.
    Translate(TranslateArgs),
    /// Score predicted pose files against references with DTW.
    EvalDtw(EvalDtwArgs),
    /// Render per-frame condition images: skeleton (c) and reinforced frame
    /// regions (d).
    Fr(FrArgs),
    /// Train the conditional frame denoiser on image/condition triples.
    TrainDiff(TrainDiffArgs),
    /// Draw frames from a trained denoiser under a fixed condition pair.
    Sample(SampleArgs),
    /// Compare frame sets: SSIM, hand SSIM and hand keypoint distance.
    Metrics(MetricsArgs),
}

#[derive(Args)]
struct PrepArgs {
    /// Tab-separated manifest: clip_id, split, pose_path, text.
    #[arg(long)]
    manifest: PathBuf,
    /// Directory of `<clip>_<frame>_keypoints.json` detector files.
    #[arg(long)]
    keypoints: PathBuf,
    /// Output directory for pose files, dataset and reports.
    #[arg(long)]
    out: PathBuf,
    /// Frame rate stamped on ingested sequences.
    #[arg(long, default_value_t = 25.0)]
    fps: f64,
    /// Repair policy for flagged frames: `median` or `drop`.
    #[arg(long, default_value = "median")]
    policy: String,
    /// Clips longer than this many frames are discarded.
    #[arg(long, default_value_t = DEFAULT_MAX_FRAMES)]
    max_frames: usize,
}

#[derive(Args)]
struct TrainPoseArgs {
    /// Serialised dataset produced by `prep`.
    #[arg(long)]
    dataset: PathBuf,
    /// Output directory for checkpoints and the loss table.
    #[arg(long)]
    out: PathBuf,
    /// Optional `key = value` training config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    /// Which split to train on.
    #[arg(long, default_value = "train")]
    split: String,
}

#[derive(Args)]
struct TranslateArgs {
    /// Translator checkpoint written by `train-pose`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset the checkpoint was trained on (vocabulary and joint count).
    #[arg(long)]
    dataset: PathBuf,
    /// Input file, one sentence per line.
    #[arg(long)]
    text: PathBuf,
    /// Output directory; line N becomes line_NNNN.pose.
    #[arg(long)]
    out: PathBuf,
    /// Config used at training time, if any.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvalDtwArgs {
    /// Directory of predicted .pose files.
    #[arg(long)]
    pred: PathBuf,
    /// Directory of reference .pose files; pairs match by file name.
    #[arg(long)]
    gt: PathBuf,
    /// Output directory for the report and histogram.
    #[arg(long)]
    out: PathBuf,
    /// Frame cost: `euclidean` or `manhattan`.
    #[arg(long, default_value = "euclidean")]
    cost: String,
    /// Report raw path costs instead of normalising by path length.
    #[arg(long)]
    raw: bool,
    /// Histogram bin width.
    #[arg(long, default_value_t = 0.05)]
    bin_width: f64,
}

#[derive(Args)]
struct FrArgs {
    /// Pose file to render.
    #[arg(long)]
    pose: PathBuf,
    /// Output directory; frame N becomes c_NNNN.pgm and d_NNNN.pgm.
    #[arg(long)]
    out: PathBuf,
    /// Optional directory of reference photos named frame_NNNN.pgm; frames
    /// without a photo fall back to filtering the rendering itself.
    #[arg(long)]
    photos: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    /// Adaptive threshold window (odd).
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    window: usize,
    /// Adaptive threshold offset below the local mean.
    #[arg(long, default_value_t = DEFAULT_OFFSET)]
    offset: f64,
}

#[derive(Args)]
struct TrainDiffArgs {
    /// Directory of training triples x_*.pgm / c_*.pgm / d_*.pgm.
    #[arg(long)]
    images: PathBuf,
    /// Output directory for the checkpoint and loss curve.
    #[arg(long)]
    out: PathBuf,
    /// Optional `key = value` denoiser config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
}

#[derive(Args)]
struct SampleArgs {
    /// Denoiser checkpoint written by `train-diff`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Skeleton condition image.
    #[arg(long)]
    cond_c: PathBuf,
    /// Reinforced frame condition image.
    #[arg(long)]
    cond_d: PathBuf,
    /// Output directory; sample N becomes sample_NNNN.pgm.
    #[arg(long)]
    out: PathBuf,
    /// Config used at training time, if any.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    count: usize,
}

#[derive(Args)]
struct MetricsArgs {
    /// Directory of predicted .pgm frames.
    #[arg(long)]
    pred: PathBuf,
    /// Directory of reference .pgm frames; pairs match by file name.
    #[arg(long)]
    gt: PathBuf,
    /// Output directory for the per-frame table.
    #[arg(long)]
    out: PathBuf,
    /// Hand box sidecar (frame_index, side, x, y, width, height).
    #[arg(long)]
    boxes: Option<PathBuf>,
    /// Predicted hand keypoint sidecar (frame_index, side, k, x, y).
    #[arg(long)]
    pred_hands: Option<PathBuf>,
    /// Reference hand keypoint sidecar, same layout as --pred-hands.
    #[arg(long)]
    gt_hands: Option<PathBuf>,
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::User(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Internal(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

/// Honour SIGNFORGE_THREADS before any parallel work starts.
fn init_threads() -> OpResult {
    match std::env::var("SIGNFORGE_THREADS") {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| {
                    Failure::user(format!(
                        "SIGNFORGE_THREADS must be a positive integer, got {v:?}"
                    ))
                })?;
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| Failure::internal(format!("thread pool: {e}")))
        }
        Err(std::env::VarError::NotPresent) => Ok(()),
        Err(e) => Err(Failure::user(format!("SIGNFORGE_THREADS: {e}"))),
    }
}

fn run() -> OpResult {
    let cli = Cli::parse();
    init_threads()?;
    match &cli.command {
        Command::Prep(a) => ops::prep(a),
        Command::TrainPose(a) => ops::train_pose(a, cli.seed),
        Command::Translate(a) => ops::translate(a, cli.seed),
        Command::EvalDtw(a) => ops::eval_dtw(a),
        Command::Fr(a) => ops::fr(a),
        Command::TrainDiff(a) => ops::train_diff(a, cli.seed),
        Command::Sample(a) => ops::sample(a, cli.seed),
        Command::Metrics(a) => ops::metrics(a),
    }
}
