use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand};
use firmil::bagstore::Split;
use firmil::milnet::ArchConfig;
use firmil::optim::Algorithm;
use serde::Serialize;

/// Gated attention MIL pipeline for three-class FIR staging of placenta slides.
#[derive(Parser, Debug, Serialize)]
#[command(name = "firmil", version, propagate_version = true)]
pub struct Cli {
    /// Seed for every random stream of the run
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Worker threads for PBT members; 0 uses every core
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    /// Log more (-v info, -vv debug) [default: warnings only]
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,

    /// TOML or JSON file of option values; command-line flags take precedence [default: none]
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    /// Segment tissue with Otsu's method and tile it into non-overlapping patches
    Tile(TileArgs),
    /// Embed the patches of one slide with the built-in toy extractor into a bag file
    Embed(EmbedArgs),
    /// Generate a synthetic labelled bag dataset with known signal instances
    Synth(SynthArgs),
    /// Assign stratified train/val/test splits, or build a manifest from bags and labels
    Split(SplitArgs),
    /// Train a single model and keep its best validation checkpoint
    Train(TrainArgs),
    /// Population-based training over optimizer hyperparameters
    Pbt(PbtArgs),
    /// Select the best top-k ensemble from a PBT run
    Ensemble(EnsembleArgs),
    /// Predict the class and attention of one bag
    Predict(PredictArgs),
    /// Render an attention heatmap and export the top-attention patches
    Heatmap(HeatmapArgs),
    /// PCA, k-means, KNN and t-SNE analysis of patch embeddings
    Analyze(AnalyzeArgs),
    /// Compute the metric report of a model on one split
    Evaluate(EvaluateArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Tile(_) => "tile",
            Command::Embed(_) => "embed",
            Command::Synth(_) => "synth",
            Command::Split(_) => "split",
            Command::Train(_) => "train",
            Command::Pbt(_) => "pbt",
            Command::Ensemble(_) => "ensemble",
            Command::Predict(_) => "predict",
            Command::Heatmap(_) => "heatmap",
            Command::Analyze(_) => "analyze",
            Command::Evaluate(_) => "evaluate",
        }
    }
}

/// Every subcommand name, for config-file section lookup.
pub const SUBCOMMANDS: [&str; 11] =
    ["tile", "embed", "synth", "split", "train", "pbt", "ensemble", "predict", "heatmap", "analyze", "evaluate"];

#[derive(Args, Debug, Serialize)]
pub struct TileArgs {
    /// Slide image (PNG or PNM)
    #[arg(long)]
    pub image: PathBuf,
    /// Patch edge length in pixels
    #[arg(long, default_value_t = firmil::tiler::DEFAULT_PATCH_SIZE)]
    pub patch: u32,
    /// Downsampling factor of the tissue mask
    #[arg(long, default_value_t = firmil::tiler::DEFAULT_DOWNSAMPLE)]
    pub downsample: u32,
    /// Minimum tissue fraction for a patch to be kept
    #[arg(long, default_value_t = firmil::tiler::DEFAULT_MIN_TISSUE_FRACTION)]
    pub min_tissue: f64,
    /// Magnification note stored in the grid file [default: none]
    #[arg(long)]
    pub magnification: Option<String>,
    /// Also write every kept patch as a PNG [default: off]
    #[arg(long)]
    pub save_patches: bool,
    /// Output directory (grid.json, mask.png, run.json)
    #[arg(long, default_value = "tiles")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct EmbedArgs {
    /// Slide image the grid was computed on
    #[arg(long)]
    pub image: PathBuf,
    /// Patch grid written by `tile`
    #[arg(long, default_value = "tiles/grid.json")]
    pub grid: PathBuf,
    /// Embedding width
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    /// Slide id used as the bag file name [default: image file stem]
    #[arg(long)]
    pub slide_id: Option<String>,
    /// Output directory for <slide_id>.milb
    #[arg(long, default_value = "bags")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct SynthArgs {
    /// Number of classes (the label set has exactly three)
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    /// Bags per class
    #[arg(long, default_value_t = 60)]
    pub bags: usize,
    /// Embedding width
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    /// Fewest patches per bag
    #[arg(long, default_value_t = 16)]
    pub min_patches: usize,
    /// Most patches per bag
    #[arg(long, default_value_t = 32)]
    pub max_patches: usize,
    /// Share of signal instances in positive bags
    #[arg(long, default_value_t = 0.1)]
    pub signal_fraction: f64,
    /// Distance of the class signal centers from the origin
    #[arg(long, default_value_t = 8.0)]
    pub separation: f64,
    /// Standard deviation of the instance noise
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
    /// Output directory (manifest.json, bags/)
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct SplitArgs {
    /// Manifest whose splits are reassigned [default: manifest.json unless --bags is given]
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Directory of .milb bags to build a new manifest from [default: none]
    #[arg(long, requires = "labels")]
    pub bags: Option<PathBuf>,
    /// CSV with columns slide_id,label (0, 1 or 2) for --bags [default: none]
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Extractor id recorded in a new manifest
    #[arg(long, default_value = "unknown")]
    pub extractor_id: String,
    /// Train fraction
    #[arg(long, default_value_t = 0.8)]
    pub train: f64,
    /// Validation fraction
    #[arg(long, default_value_t = 0.1)]
    pub val: f64,
    /// Test fraction
    #[arg(long, default_value_t = 0.1)]
    pub test: f64,
    /// Manifest to write [default: the input manifest, or manifest.json]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize, Clone)]
pub struct ArchArgs {
    /// Width of the first fully connected layer
    #[arg(long, default_value_t = 512)]
    pub hidden: usize,
    /// Width of the gated attention layer
    #[arg(long, default_value_t = 256)]
    pub gate: usize,
    /// Hidden width of each attention branch
    #[arg(long, default_value_t = 64)]
    pub attn_hidden: usize,
}

impl ArchArgs {
    pub fn arch(&self, input_dim: usize) -> ArchConfig {
        ArchConfig {
            hidden_dim: self.hidden,
            gate_dim: self.gate,
            attn_hidden: self.attn_hidden,
            ..ArchConfig::new(input_dim)
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    /// Dataset manifest
    #[arg(long, default_value = "manifest.json")]
    pub manifest: PathBuf,
    /// Training epochs
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    /// Optimizer: sgd, adam, rmsprop or adagrad
    #[arg(long, default_value = "adam")]
    pub optimizer: Algorithm,
    /// Learning rate
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Per-epoch learning-rate multiplier
    #[arg(long, default_value_t = 1.0)]
    pub lr_decay: f64,
    /// SGD momentum
    #[arg(long, default_value_t = 0.0)]
    pub momentum: f64,
    /// Evaluate with an exponential moving average of the weights [default: off]
    #[arg(long)]
    pub ema: bool,
    /// Decay of the weight moving average
    #[arg(long, default_value_t = 0.99)]
    pub ema_momentum: f64,
    #[command(flatten)]
    pub arch: ArchArgs,
    /// Output directory (model.milc, history.csv, run.json)
    #[arg(long, default_value = "train")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct PbtArgs {
    /// Dataset manifest
    #[arg(long, default_value = "manifest.json")]
    pub manifest: PathBuf,
    /// Population size
    #[arg(long, default_value_t = 8)]
    pub population: usize,
    /// Epochs per member
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    /// Epochs every member trains before the first exploit step
    #[arg(long, default_value_t = 15)]
    pub min_epochs: usize,
    /// Epochs between exploit steps
    #[arg(long, default_value_t = 5)]
    pub interval: usize,
    /// Share of the population replaced at each exploit step; 0 disables exploitation
    #[arg(long, default_value_t = 0.25)]
    pub truncation: f64,
    /// Probability of resampling the optimizer or flipping EMA when exploring
    #[arg(long, default_value_t = 0.25)]
    pub resample_prob: f64,
    /// Run the no-exploit random-search baseline instead [default: off]
    #[arg(long)]
    pub random_search: bool,
    #[command(flatten)]
    pub arch: ArchArgs,
    /// Output directory (report.csv, summary.json, checkpoints/, run.json)
    #[arg(long, default_value = "pbt")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct EnsembleArgs {
    /// PBT output directory
    #[arg(long, default_value = "pbt")]
    pub pbt: PathBuf,
    /// Dataset manifest (its val split scores each k)
    #[arg(long, default_value = "manifest.json")]
    pub manifest: PathBuf,
    /// Largest ensemble size tried
    #[arg(long, default_value_t = 6)]
    pub k_max: usize,
    /// Output directory (ensemble.json, run.json)
    #[arg(long, default_value = "ensemble")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct PredictArgs {
    /// Checkpoint (.milc) or ensemble manifest (.json)
    #[arg(long, default_value = "ensemble/ensemble.json")]
    pub model: PathBuf,
    /// Bag file
    #[arg(long)]
    pub bag: PathBuf,
    /// Output directory (prediction.json, attention.csv)
    #[arg(long, default_value = "predict")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct HeatmapArgs {
    /// Slide image
    #[arg(long)]
    pub image: PathBuf,
    /// Patch grid of the slide
    #[arg(long, default_value = "tiles/grid.json")]
    pub grid: PathBuf,
    /// Bag of the slide, rows in grid order
    #[arg(long)]
    pub bag: PathBuf,
    /// Checkpoint (.milc) or ensemble manifest (.json)
    #[arg(long, default_value = "ensemble/ensemble.json")]
    pub model: PathBuf,
    /// Output downsampling factor
    #[arg(long, default_value_t = 16)]
    pub scale: u32,
    /// Overlay opacity in [0, 1]
    #[arg(long, default_value_t = 0.5)]
    pub opacity: f64,
    /// Attention branch to draw [default: predicted class]
    #[arg(long)]
    pub class: Option<usize>,
    /// Number of top-attention patches to export
    #[arg(long, default_value_t = 2)]
    pub top_k: usize,
    /// Output directory (heatmap.png, top_NN.png, top.json)
    #[arg(long, default_value = "heatmap")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct AnalyzeArgs {
    /// Dataset manifest; every bag is read
    #[arg(long, default_value = "manifest.json")]
    pub manifest: PathBuf,
    /// CSV slide_id,x,y,label of patch classes [default: each bag's label]
    #[arg(long)]
    pub patch_labels: Option<PathBuf>,
    /// Random subsample size
    #[arg(long, default_value_t = 1000)]
    pub max_points: usize,
    /// PCA components kept (capped by the data)
    #[arg(long, default_value_t = 50)]
    pub pca: usize,
    /// k-means clusters
    #[arg(long, default_value_t = 5)]
    pub clusters: usize,
    /// Neighbours for the KNN classifier
    #[arg(long, default_value_t = 5)]
    pub knn: usize,
    /// Share of each class held out for KNN testing
    #[arg(long, default_value_t = 0.2)]
    pub holdout: f64,
    /// t-SNE perplexity
    #[arg(long, default_value_t = 30.0)]
    pub perplexity: f64,
    /// t-SNE iterations
    #[arg(long, default_value_t = 1000)]
    pub tsne_iters: usize,
    /// Skip t-SNE [default: off]
    #[arg(long)]
    pub no_tsne: bool,
    /// Output directory
    #[arg(long, default_value = "analysis")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct EvaluateArgs {
    /// Dataset manifest
    #[arg(long, default_value = "manifest.json")]
    pub manifest: PathBuf,
    /// Checkpoint (.milc) or ensemble manifest (.json)
    #[arg(long, default_value = "ensemble/ensemble.json")]
    pub model: PathBuf,
    /// Split to evaluate: train, val or test
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Directory for metrics.json, confusion.csv and run.json [default: print only]
    #[arg(long)]
    pub out: Option<PathBuf>,
}
