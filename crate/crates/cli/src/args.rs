use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "fencepipe", version, about = "Fence insulator segmentation, fence-type recognition and detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene dataset with masks and annotations.
    GenSynth(GenSynthArgs),
    /// Cut images (and masks) into square tiles.
    Slice(SliceArgs),
    /// Rasterize region annotations into binary masks.
    ImportAnnotations(ImportArgs),
    /// Write seeded augmented copies of a dataset.
    Augment(AugmentArgs),
    /// Assign stratified train/val/test splits.
    Split(SplitArgs),
    /// Train a U-Net on image/mask pairs.
    TrainSeg(TrainSegArgs),
    /// Train a fence-type classifier.
    TrainCls(TrainClsArgs),
    /// Evaluate a model or score a confusion matrix.
    Eval(EvalArgs),
    /// Find insulator boxes in an image.
    Detect(DetectArgs),
    /// Build score tables and curve data from evaluation records.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceArg {
    Drone,
    Still,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenSynthArgs {
    /// Number of scenes.
    #[arg(long, default_value_t = 52)]
    pub n: usize,
    /// Scene counts as `single,double`; an even split when omitted.
    #[arg(long)]
    pub balance: Option<String>,
    #[arg(long, env = "FENCEPIPE_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    /// Insulators per scene.
    #[arg(long, default_value_t = 3)]
    pub insulators: usize,
    /// Insulator side length in pixels.
    #[arg(long, default_value_t = 3)]
    pub insulator_size: usize,
    #[arg(long, value_enum, default_value_t = SourceArg::Drone)]
    pub source: SourceArg,
    /// Keep texture and jitter fixed instead of drawing them per scene.
    #[arg(long)]
    pub no_vary: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SliceArgs {
    /// Dataset manifest to slice.
    #[arg(long, conflicts_with = "image", required_unless_present = "image")]
    pub manifest: Option<PathBuf>,
    /// Single image to slice.
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Mask matching `--image`.
    #[arg(long, requires = "image")]
    pub mask: Option<PathBuf>,
    #[arg(long, default_value_t = 512)]
    pub tile: usize,
    /// Keep only tiles with at least this many positive mask pixels.
    #[arg(long)]
    pub min_positive: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ImportArgs {
    /// Annotation JSON (image id → regions).
    #[arg(long)]
    pub annotations: PathBuf,
    /// Rasterize a mask for every manifest entry.
    #[arg(long, conflicts_with = "id")]
    pub manifest: Option<PathBuf>,
    /// Rasterize a single image's regions.
    #[arg(long, requires_all = ["width", "height"])]
    pub id: Option<String>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    /// Output directory (manifest mode) or mask file (single mode).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AugmentArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Augmented copies per image.
    #[arg(long, default_value_t = 1)]
    pub copies: usize,
    /// Also list the unmodified images in the output manifest.
    #[arg(long)]
    pub include_originals: bool,
    #[arg(long, env = "FENCEPIPE_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Train, val and test fractions.
    #[arg(long, default_value = "0.8,0.1,0.1")]
    pub frac: String,
    #[arg(long, env = "FENCEPIPE_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Output manifest; the input is rewritten when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LossArg {
    Dice,
    CrossEntropy,
    BceDice,
    SquaredError,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainCommon {
    /// Manifest with splits assigned.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory for weights, log and curves.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    pub optimizer: OptimizerArg,
    #[arg(long, env = "FENCEPIPE_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Start from these weights instead of a fresh initialization.
    #[arg(long)]
    pub init: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PaddingArg {
    Same,
    Valid,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainSegArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: TrainCommon,
    #[arg(long, value_enum, default_value_t = LossArg::Dice)]
    pub loss: LossArg,
    #[arg(long, default_value_t = 3)]
    pub depth: usize,
    #[arg(long, default_value_t = 8)]
    pub filters: usize,
    #[arg(long, value_enum, default_value_t = PaddingArg::Same)]
    pub padding: PaddingArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchArg {
    Cnn,
    Residual,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainClsArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: TrainCommon,
    #[arg(long, value_enum, default_value_t = LossArg::CrossEntropy)]
    pub loss: LossArg,
    #[arg(long, value_enum, default_value_t = ArchArg::Residual)]
    pub arch: ArchArg,
    /// Images are resized to this square size.
    #[arg(long, default_value_t = 64)]
    pub input_size: usize,
    #[arg(long, default_value_t = 3)]
    pub blocks: usize,
    #[arg(long, default_value_t = 8)]
    pub filters: usize,
    /// Train only the dense head (requires `--init`).
    #[arg(long, requires = "init")]
    pub freeze_backbone: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalArgs {
    /// Row-major confusion counts, rows actual, columns predicted.
    #[arg(long, conflicts_with_all = ["weights", "manifest"])]
    pub confusion: Option<String>,
    /// Class names for `--confusion`.
    #[arg(long, default_value = "double,single")]
    pub labels: String,
    #[arg(long, requires = "manifest")]
    pub weights: Option<PathBuf>,
    #[arg(long, requires = "weights")]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Loss to report; the training loss when omitted.
    #[arg(long, value_enum)]
    pub loss: Option<LossArg>,
    /// Also write the evaluation record here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DetectArgs {
    /// Scene image.
    #[arg(long)]
    pub image: PathBuf,
    /// Segmentation weights used to predict the mask.
    #[arg(long, conflicts_with = "predicted", required_unless_present = "predicted")]
    pub weights: Option<PathBuf>,
    /// Existing predicted mask (gray levels read as probabilities).
    #[arg(long)]
    pub predicted: Option<PathBuf>,
    /// Tile size for model inference.
    #[arg(long, default_value_t = 512)]
    pub tile: usize,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long, default_value_t = 3)]
    pub pad: usize,
    #[arg(long, default_value_t = 8)]
    pub connectivity: u32,
    #[arg(long, default_value_t = 1)]
    pub min_area: usize,
    /// Ground-truth mask for a residual map and scores.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ReportArgs {
    /// Evaluation record written by `eval --out`; repeatable.
    #[arg(long = "eval", required = true)]
    pub evals: Vec<PathBuf>,
    /// Training log written by `train-seg` or `train-cls`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}
