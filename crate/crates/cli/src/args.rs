use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use posefuse::bagging::{BaggingMode, WeightNormalization};
use posefuse::stacking::{LearnerKind, Optimizer};

#[derive(Debug, Parser)]
#[command(name = "posefuse", version, about = "Fuse multi-person pose predictions from several base estimators")]
pub struct Cli {
    /// Worker threads for data-parallel stages; 0 uses every core
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Group co-referring detections across models, per image
    Match(MatchArgs),
    /// Match and fuse predictions, then write a results file
    Fuse(FuseArgs),
    /// Build a stacking dataset against ground truth and train a meta-learner
    TrainStack(TrainStackArgs),
    /// Add plausible limb-transformed poses to an annotation file
    Augment(AugmentArgs),
    /// Score a results file against ground truth
    Eval(EvalArgs),
    /// Time the match-and-fuse pipeline on synthetic frames
    Bench(BenchArgs),
    /// Write a synthetic ground-truth file, simulated detector outputs and a run config
    Synth(SynthArgs),
    /// Compare detectors and fusion strategies on synthetic scenes
    Experiment(ExperimentArgs),
}

/// Fields shared with the run configuration file. A flag always wins over
/// the config value.
#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML run configuration; relative paths inside it resolve against its directory
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Skeleton: coco17 or mpii16 [default: coco17]
    #[arg(long)]
    pub skeleton: Option<String>,
    /// Seed for every random choice [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// COCO keypoint annotation file
    #[arg(long)]
    pub ground_truth: Option<PathBuf>,
    /// Prediction file as MODEL_ID=PATH; repeat once per model (replaces the config's list)
    #[arg(long = "predictions", value_name = "MODEL_ID=PATH", value_parser = parse_prediction)]
    pub predictions: Vec<(String, PathBuf)>,
    /// Minimum OKS for a detection to join a group [default: 0.5]
    #[arg(long)]
    pub oks_threshold: Option<f64>,
    /// Keep groups found by a single model [default: true]
    #[arg(long)]
    pub allow_singletons: Option<bool>,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Write the groups here instead of standard output
    #[arg(long)]
    pub groups: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum StrategyArg {
    Simple,
    Weighted,
    Stack,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Fusion strategy [default: the config's bagging mode, else weighted]
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyArg>,
    /// Stacking model file, required by --strategy stack
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Results file [default: fused_results.json]
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// JSON summary file
    #[arg(long)]
    pub summary: Option<PathBuf>,
    /// Score stabilizer in w = 1 / ((1 - sc)^2 + eps) [default: 1e-6]
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Weighted translation normalization: sum_weights or paper_1_over_n [default: sum_weights]
    #[arg(long)]
    pub weight_normalization: Option<WeightNormalization>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dropout rate on hidden layers [default: 0.4]
    #[arg(long)]
    pub dropout_rate: Option<f64>,
    /// Learning rate [default: 0.004]
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// L2 weight decay [default: 0]
    #[arg(long)]
    pub decay: Option<f64>,
    /// Training epochs [default: 40]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Mini-batch size [default: 200]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Training share of the train/validation split [default: 0.8]
    #[arg(long)]
    pub split_ratio: Option<f64>,
    /// Epochs without validation improvement before stopping; 0 disables [default: 5]
    #[arg(long)]
    pub early_stop_patience: Option<usize>,
    /// Optimizer: sgd or adam [default: sgd]
    #[arg(long)]
    pub optimizer: Option<Optimizer>,
}

#[derive(Debug, Args)]
pub struct TrainStackArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Meta-learner: ridge, random_forest or mlp
    #[arg(long, default_value_t = LearnerKind::Mlp)]
    pub learner: LearnerKind,
    /// Model file to write [default: the config's model path]
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// JSON training report file
    #[arg(long)]
    pub summary: Option<PathBuf>,
    /// Ridge penalty
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    /// MLP hidden layer widths, comma separated
    #[arg(long, value_delimiter = ',', default_values_t = [64, 64])]
    pub hidden: Vec<usize>,
    /// Random forest size
    #[arg(long, default_value_t = 100)]
    pub trees: usize,
    /// Random forest depth limit
    #[arg(long, default_value_t = 8)]
    pub max_depth: usize,
    /// Random forest minimum rows per leaf
    #[arg(long, default_value_t = 2)]
    pub min_leaf: usize,
    /// Extra rows made by articulating matched rows; 0 disables
    #[arg(long, default_value_t = 0)]
    pub augment_budget: usize,
    #[command(flatten)]
    pub transform: TransformArgs,
}

#[derive(Debug, Args)]
pub struct TransformArgs {
    /// Largest limb rotation, radians
    #[arg(long, default_value_t = 0.52)]
    pub limb_rotation_max: f64,
    /// Smallest limb scale factor
    #[arg(long, default_value_t = 0.8)]
    pub limb_scale_min: f64,
    /// Largest limb scale factor
    #[arg(long, default_value_t = 1.2)]
    pub limb_scale_max: f64,
    /// Rejected draws tolerated per requested pose
    #[arg(long, default_value_t = 10)]
    pub attempts_max: usize,
    /// Largest bone-ratio z-score a pose may reach
    #[arg(long, default_value_t = 3.0)]
    pub plausibility_threshold: f64,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    /// TOML run configuration supplying skeleton, seed and ground truth
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Skeleton: coco17 or mpii16 [default: coco17]
    #[arg(long)]
    pub skeleton: Option<String>,
    /// Seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Source annotation file
    #[arg(long)]
    pub ground_truth: Option<PathBuf>,
    /// Annotation file to write: the source poses followed by the new ones
    #[arg(long)]
    pub output: PathBuf,
    /// Number of poses to add
    #[arg(long, default_value_t = 100)]
    pub budget: usize,
    /// Pose clusters used to favor rare articulations
    #[arg(long, default_value_t = 8)]
    pub clusters: usize,
    #[command(flatten)]
    pub transform: TransformArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// TOML run configuration supplying skeleton, ground truth and results path
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Skeleton: coco17 or mpii16 [default: coco17]
    #[arg(long)]
    pub skeleton: Option<String>,
    /// COCO keypoint annotation file
    #[arg(long)]
    pub ground_truth: Option<PathBuf>,
    /// Results file to score [default: the config's output]
    #[arg(long)]
    pub results: Option<PathBuf>,
    /// Pixel radius for keypoint confusion counts; omitted skips them
    #[arg(long)]
    pub distance_threshold: Option<f64>,
    /// Print the report as JSON instead of a table
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Frame sizes as WIDTHxHEIGHT, comma separated
    #[arg(long, value_delimiter = ',', value_parser = parse_resolution, default_value = "640x480,1280x720,1920x1080")]
    pub resolutions: Vec<(u32, u32)>,
    /// Timed runs per resolution (at least 3)
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    /// People per frame
    #[arg(long, default_value_t = 4)]
    pub people: usize,
    /// Seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the fused poses of every frame here
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SceneArgs {
    /// Skeleton: coco17 or mpii16
    #[arg(long, default_value = "coco17")]
    pub skeleton: String,
    /// Fewest people per scene
    #[arg(long, default_value_t = 1)]
    pub people_min: usize,
    /// Most people per scene
    #[arg(long, default_value_t = 4)]
    pub people_max: usize,
    /// Image width
    #[arg(long, default_value_t = 640)]
    pub width: u32,
    /// Image height
    #[arg(long, default_value_t = 480)]
    pub height: u32,
    /// Simulated detector as NAME:SIGMA[:SCORE_BIAS[:MISS_RATE[:DX:DY]]]; repeat per detector
    #[arg(long = "detector", value_parser = parse_detector, default_values = ["det_a:4", "det_b:4"])]
    pub detectors: Vec<DetectorArg>,
    /// Seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    /// Directory receiving ground_truth.json, one results file per detector and run.toml
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Number of scenes
    #[arg(long, default_value_t = 50)]
    pub scenes: usize,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    /// Number of evaluation scenes
    #[arg(long, default_value_t = 200)]
    pub scenes: usize,
    /// Strategies: simple, weighted, weighted_1_over_n, stack:ridge, stack:random_forest, stack:mlp
    #[arg(long = "strategy", default_values = ["simple", "weighted"])]
    pub strategies: Vec<String>,
    /// Scenes used to train stacking strategies
    #[arg(long, default_value_t = 200)]
    pub stack_train_scenes: usize,
    /// Print the report as JSON instead of a table
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorArg {
    pub name: String,
    pub sigma: f64,
    pub score_bias: f64,
    pub miss_rate: f64,
    pub offset: (f64, f64),
}

fn parse_prediction(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((id, path)) if !id.is_empty() && !path.is_empty() => Ok((id.to_string(), PathBuf::from(path))),
        _ => Err(format!("expected MODEL_ID=PATH, got `{s}`")),
    }
}

fn parse_resolution(s: &str) -> Result<(u32, u32), String> {
    let (w, h) = s.split_once('x').ok_or_else(|| format!("expected WIDTHxHEIGHT, got `{s}`"))?;
    let num = |v: &str| v.trim().parse::<u32>().map_err(|e| format!("bad resolution `{s}`: {e}"));
    Ok((num(w)?, num(h)?))
}

fn parse_detector(s: &str) -> Result<DetectorArg, String> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() < 2 || parts.len() == 5 || parts.len() > 6 || parts[0].is_empty() {
        return Err(format!("expected NAME:SIGMA[:SCORE_BIAS[:MISS_RATE[:DX:DY]]], got `{s}`"));
    }
    let num = |i: usize| -> Result<f64, String> {
        parts.get(i).map_or(Ok(0.0), |v| v.parse::<f64>().map_err(|e| format!("bad number `{v}` in `{s}`: {e}")))
    };
    Ok(DetectorArg {
        name: parts[0].to_string(),
        sigma: num(1)?,
        score_bias: num(2)?,
        miss_rate: num(3)?,
        offset: (num(4)?, num(5)?),
    })
}

impl StrategyArg {
    pub fn mode(self) -> Option<BaggingMode> {
        match self {
            StrategyArg::Simple => Some(BaggingMode::Simple),
            StrategyArg::Weighted => Some(BaggingMode::Weighted),
            StrategyArg::Stack => None,
        }
    }
}
