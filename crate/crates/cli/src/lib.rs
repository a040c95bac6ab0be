//! Argument parsing and dispatch for the `vspw` binary.
//!
//! Every subcommand returns the text it prints on stdout, so a run's output
//! is assembled in full before anything is shown.

mod data;
mod files;
mod merge;
mod train;

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use files::write_atomic;

#[derive(Debug, Parser)]
#[command(
    name = "vspw",
    version = concat!(env!("CARGO_PKG_VERSION"), " (", env!("CARGO_PKG_NAME"), ")"),
    about = "Segmentation losses, ensembling, TTA merging and mIoU evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Rewrite class ids of every mask in a directory through a mapping table.
    Remap(RemapArgs),
    /// Write a keep/drop manifest from the valid-pixel ratio of every mask.
    Filter(FilterArgs),
    /// Mean IoU of predicted masks against ground truth.
    Eval(EvalArgs),
    /// Blend probability maps: a weighted pair or a plain mean.
    Ensemble(EnsembleArgs),
    /// Per-pixel majority vote over label masks.
    Vote(VoteArgs),
    /// Convert a probability tensor to a label mask.
    Argmax(ArgmaxArgs),
    /// Stitch sliding-window tensors back into a full map.
    TtaMerge(TtaMergeArgs),
    /// Average a map with the mirrored output on the flipped input.
    FlipMerge(FlipMergeArgs),
    /// Finite-difference check of every loss gradient.
    Gradcheck(GradcheckArgs),
    /// Contrastive loss of two frames of patch features.
    NceEval(NceEvalArgs),
    /// Train the synthetic two-frame model and report feature separation.
    TrainToy(TrainToyArgs),
}

#[derive(Debug, Args)]
pub struct RemapArgs {
    /// Tab-separated `source<TAB>target` table; target `-` means ignore.
    #[arg(long)]
    pub table: PathBuf,
    /// Directory of source PGM masks.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Directory for remapped masks, same relative names.
    #[arg(long = "out")]
    pub output: PathBuf,
    /// Fail on ids missing from the table instead of mapping them to ignore.
    #[arg(long)]
    pub strict_table: bool,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    /// Directory of PGM masks.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Remap through this table before measuring.
    #[arg(long)]
    pub table: Option<PathBuf>,
    #[arg(long, default_value_t = vspw_core::label_map::DEFAULT_KEEP_THRESHOLD)]
    pub threshold: f64,
    /// Keep only ratios strictly above the threshold.
    #[arg(long)]
    pub strict: bool,
    /// Manifest path; stdout when absent.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub classes: usize,
    /// Directory of predicted PGM masks.
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of ground-truth PGM masks.
    #[arg(long)]
    pub gt: PathBuf,
    /// Average over every class instead of classes that occur.
    #[arg(long)]
    pub all_classes: bool,
    /// Score each top-level subdirectory separately and average the scores.
    #[arg(long)]
    pub per_video: bool,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("mode").required(true).args(["tau", "mean"])))]
pub struct EnsembleArgs {
    /// Weight on the first input; the second gets `1 - tau`.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Unweighted mean of all inputs.
    #[arg(long)]
    pub mean: bool,
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct VoteArgs {
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct ArgmaxArgs {
    pub input: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct TtaMergeArgs {
    /// `H,W,hw,ww,s`; the stride may be left off for two thirds of the window.
    #[arg(long)]
    pub plan: String,
    /// Window tensors in plan order, rows outer.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct FlipMergeArgs {
    pub input: PathBuf,
    /// Output on the horizontally mirrored input.
    pub flipped: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub seed: u64,
    /// Random instances per loss.
    #[arg(long, default_value_t = 50)]
    pub instances: usize,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DivideByArg {
    Contributing,
    All,
}

#[derive(Debug, Args)]
pub struct NceArgs {
    #[arg(long, default_value_t = 0.1)]
    pub temperature: f64,
    #[arg(long, default_value_t = 64)]
    pub negatives: usize,
    #[arg(long, default_value_t = 8)]
    pub positive_cap: usize,
    /// L2-normalize features before the dot products.
    #[arg(long)]
    pub normalize: bool,
    #[arg(long, value_enum, default_value_t = DivideByArg::Contributing)]
    pub divide_by: DivideByArg,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("labels").required(true).args(["classes", "gt"])))]
pub struct NceEvalArgs {
    /// Two LGT tensors, one per frame; channels are the feature dimension.
    #[arg(num_args = 2, required = true)]
    pub frames: Vec<PathBuf>,
    /// Whitespace-separated patch classes, frame-major, `-` or 255 for ignore.
    #[arg(long)]
    pub classes: Option<PathBuf>,
    /// Two ground-truth masks; patch classes are their per-patch majority.
    #[arg(long, num_args = 2)]
    pub gt: Option<Vec<PathBuf>>,
    #[arg(long)]
    pub seed: u64,
    #[command(flatten)]
    pub nce: NceArgs,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct TrainToyArgs {
    #[arg(long)]
    pub seed: u64,
    /// Weight of the contrastive term.
    #[arg(long, default_value_t = 0.1)]
    pub lambda2: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda1: f64,
    #[arg(long, default_value_t = 5.0)]
    pub lambda3: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda4: f64,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 2)]
    pub frames: usize,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    /// Patches per frame.
    #[arg(long, default_value_t = 24)]
    pub patches: usize,
    #[arg(long, default_value_t = 8)]
    pub d_emb: usize,
    #[arg(long, default_value_t = 0.1)]
    pub temperature: f64,
    #[arg(long, default_value_t = 64)]
    pub negatives: usize,
    /// Raw dot-product similarities instead of cosines.
    #[arg(long)]
    pub dot_product: bool,
    #[arg(long)]
    pub json: bool,
}

/// A bad flag combination that clap cannot express; exits like a parse error.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// A check that ran to completion and failed; `stdout` is still printed.
#[derive(Debug)]
pub struct CheckFailed {
    pub stdout: String,
    pub message: String,
}

impl fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CheckFailed {}

pub(crate) fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Runs one subcommand and returns its stdout text.
pub fn dispatch(cli: Cli) -> anyhow::Result<String> {
    match cli.command {
        Command::Remap(a) => data::remap(&a),
        Command::Filter(a) => data::filter(&a),
        Command::Eval(a) => data::eval(&a),
        Command::Ensemble(a) => merge::ensemble(&a),
        Command::Vote(a) => merge::vote(&a),
        Command::Argmax(a) => merge::argmax(&a),
        Command::TtaMerge(a) => merge::tta_merge(&a),
        Command::FlipMerge(a) => merge::flip_merge(&a),
        Command::Gradcheck(a) => train::gradcheck(&a),
        Command::NceEval(a) => train::nce_eval(&a),
        Command::TrainToy(a) => train::train_toy(&a),
    }
}

/// Exit status for a failed run: 2 for usage errors, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<UsageError>().is_some() {
        2
    } else {
        1
    }
}
