//! Command-line flags. Every flag is optional so that unset flags fall
//! through to the environment, the config file and the built-in defaults.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "xagg", version, about = "Explanation aggregation, faithfulness evaluation and attacks for small CNNs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the reference CNN on a dataset.
    Train(TrainArgs),
    /// Explain one image with a single method or an aggregate.
    Explain(ExplainArgs),
    /// IROF score per method and image, with random and Sobel baselines.
    EvalIrof(IrofArgs),
    /// Sensitivity-n curves per method.
    EvalSensn(SensnArgs),
    /// IROF ratio of every two-method aggregate against its members.
    Pairwise(PairwiseArgs),
    /// Targeted or blank-region attacks on explanations.
    Attack(AttackArgs),
    /// Attack one method and score the others on the same inputs.
    Transfer(TransferArgs),
    /// Check the error decomposition of aggregated maps on synthetic stacks.
    Decompose(DecomposeArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Explain(_) => "explain",
            Command::EvalIrof(_) => "eval-irof",
            Command::EvalSensn(_) => "eval-sensn",
            Command::Pairwise(_) => "pairwise",
            Command::Attack(_) => "attack",
            Command::Transfer(_) => "transfer",
            Command::Decompose(_) => "decompose",
        }
    }
}

#[derive(Debug, Default, Args, Serialize)]
pub struct CommonArgs {
    /// TOML file with defaults; a `[command]` table applies to one command.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for per-image work.
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub out_dir: Option<String>,
    /// Dataset root (also `XAGG_DATA_DIR`).
    #[arg(long)]
    pub data_dir: Option<String>,
}

#[derive(Debug, Default, Args, Serialize)]
pub struct ModelArgs {
    #[arg(long)]
    pub ckpt: Option<String>,
    /// mnist, fashion or synthetic; defaults to the checkpoint's dataset.
    #[arg(long)]
    pub dataset: Option<String>,
}

#[derive(Debug, Default, Args, Serialize)]
pub struct SelectionArgs {
    #[arg(long)]
    pub n_images: Option<usize>,
    /// Index of the first test image.
    #[arg(long)]
    pub image_offset: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub dataset: Option<String>,
    /// Checkpoint file name under the output directory.
    #[arg(long)]
    pub out: Option<String>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Train on the first N training images only.
    #[arg(long)]
    pub train_limit: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct ExplainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub image_index: Option<usize>,
    /// sm, gb, ig, sg, gc, lrp, lime, agg-mean or agg-var.
    #[arg(long)]
    pub method: Option<String>,
    /// Comma-separated aggregate members.
    #[arg(long)]
    pub members: Option<String>,
    /// Class to explain; defaults to the prediction.
    #[arg(long)]
    pub class: Option<usize>,
    /// Fixed agg-var epsilon instead of calibrating it.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Heatmap file name under the output directory.
    #[arg(long)]
    pub out: Option<String>,
}

#[derive(Debug, Args, Serialize)]
pub struct IrofArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub selection: SelectionArgs,
    /// Comma-separated methods, aggregates included.
    #[arg(long)]
    pub methods: Option<String>,
    #[arg(long)]
    pub members: Option<String>,
    /// slic or grid.
    #[arg(long)]
    pub segments: Option<String>,
    /// mean or zero.
    #[arg(long)]
    pub fill: Option<String>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub csv: Option<String>,
}

#[derive(Debug, Args, Serialize)]
pub struct SensnArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub selection: SelectionArgs,
    #[arg(long)]
    pub methods: Option<String>,
    #[arg(long)]
    pub members: Option<String>,
    /// Number of log-spaced subset sizes.
    #[arg(long)]
    pub n_grid: Option<usize>,
    #[arg(long)]
    pub subsets: Option<usize>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub csv: Option<String>,
}

#[derive(Debug, Args, Serialize)]
pub struct PairwiseArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub selection: SelectionArgs,
    #[arg(long)]
    pub methods: Option<String>,
    #[arg(long)]
    pub segments: Option<String>,
    #[arg(long)]
    pub csv: Option<String>,
}

#[derive(Debug, Default, Args, Serialize)]
pub struct AttackParamArgs {
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// adam or gd.
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub beta_start: Option<f64>,
    #[arg(long)]
    pub beta_end: Option<f64>,
    /// Offset from each image to the image whose explanation is the target.
    #[arg(long)]
    pub target_offset: Option<usize>,
    /// Write per-run heatmaps (true or false).
    #[arg(long)]
    pub save_heatmaps: Option<bool>,
}

#[derive(Debug, Args, Serialize)]
pub struct AttackArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub selection: SelectionArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub params: AttackParamArgs,
    /// Comma-separated explainers: sm, gb, lrp, agg-mean or agg-mean:a+b.
    #[arg(long)]
    pub attacked: Option<String>,
    /// target or blank.
    #[arg(long)]
    pub objective: Option<String>,
    #[arg(long)]
    pub csv: Option<String>,
}

#[derive(Debug, Args, Serialize)]
pub struct TransferArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub selection: SelectionArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub params: AttackParamArgs,
    #[arg(long)]
    pub attacked_set: Option<String>,
    #[arg(long)]
    pub eval_set: Option<String>,
    #[arg(long)]
    pub csv: Option<String>,
}

#[derive(Debug, Args, Serialize)]
pub struct DecomposeArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub trials: Option<usize>,
    /// Report file name under the output directory.
    #[arg(long)]
    pub out: Option<String>,
}
