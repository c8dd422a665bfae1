//! Resolved run configurations and the code behind each subcommand. Each
//! `run_*` writes its artifacts and returns a JSON summary for stdout.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use xagg_core::attack::{AttackConfig, Explainer, Optimizer};
use xagg_core::data::{self, make_synthetic, Dataset, DatasetName, Split, SyntheticSpec};
use xagg_core::evaluate::report::{write_csv, AttackRow};
use xagg_core::evaluate::{log_grid, Similarity, SensitivityConfig};
use xagg_core::explain::{ExplainConfig, Method};
use xagg_core::model::{accuracy, build_reference_cnn, train_with, Checkpoint, TrainConfig};

use crate::cli::{Cli, Command};
use crate::config::{self, Layers};
use crate::error::{CliError, CliResult};
use crate::output::OutputDir;
use crate::pipeline::{
    attack_runs, blank_runs, AttackMaps, decompose_trials, irof_table, pairwise_table, parse_members, parse_methods, sensn_table,
    summarize_rows, DecomposeSettings, EvalMethod, ExplainSetup, Fill, IrofSettings, SegmentKind,
};

pub const SYNTHETIC_TRAIN: usize = 6000;
pub const SYNTHETIC_TEST: usize = 1000;

fn default_members() -> Vec<String> {
    Method::AGGREGATE_DEFAULT.iter().map(|m| m.id().to_string()).collect()
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

/// Loads a split of `name` (`mnist`, `fashion` or `synthetic`).
pub fn load_dataset(name: &str, split: Split, data_dir: Option<&str>) -> CliResult<Dataset> {
    if name.eq_ignore_ascii_case("synthetic") {
        let (seed, n) = match split {
            Split::Train => (0, SYNTHETIC_TRAIN),
            Split::Test => (1, SYNTHETIC_TEST),
        };
        let spec = SyntheticSpec {
            seed,
            ..Default::default()
        };
        return Ok(make_synthetic(&spec, n)?.dataset);
    }
    let dataset: DatasetName = name.parse()?;
    let root = data_dir.map_or_else(data::data_dir, PathBuf::from);
    data::load(&root, dataset, split).map_err(|e| CliError::input(format!("{} ({}): {e}", name, root.display())))
}

pub fn load_checkpoint(path: &str) -> CliResult<Checkpoint> {
    if path.is_empty() {
        return Err(CliError::usage("--ckpt is required"));
    }
    Checkpoint::load(path).map_err(|e| CliError::input(format!("{path}: {e}")))
}

/// Dataset named in the config, else the one recorded in the checkpoint.
fn dataset_for(explicit: &Option<String>, ck: &Checkpoint) -> CliResult<String> {
    match explicit {
        Some(d) => Ok(d.clone()),
        None if !ck.metadata.dataset.is_empty() => Ok(ck.metadata.dataset.clone()),
        None => Err(CliError::usage("checkpoint names no dataset; pass --dataset")),
    }
}

fn select(ds: &Dataset, offset: usize, n: usize) -> CliResult<Vec<usize>> {
    if n == 0 {
        return Err(CliError::usage("n_images must be ≥ 1"));
    }
    if offset + n > ds.len() {
        return Err(CliError::usage(format!(
            "images {offset}..{} exceed the {} available",
            offset + n,
            ds.len()
        )));
    }
    Ok((offset..offset + n).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRun {
    pub dataset: String,
    pub out: String,
    pub out_dir: String,
    pub data_dir: Option<String>,
    pub train_limit: Option<usize>,
    #[serde(flatten)]
    pub training: TrainConfig,
}

impl Default for TrainRun {
    fn default() -> Self {
        Self {
            dataset: "mnist".into(),
            out: "model.xagc".into(),
            out_dir: ".".into(),
            data_dir: None,
            train_limit: None,
            training: TrainConfig::default(),
        }
    }
}

#[derive(Serialize)]
struct HistoryRow {
    epoch: usize,
    train_loss: f64,
    val_loss: f64,
    val_accuracy: f64,
}

pub fn run_train(cfg: &TrainRun) -> CliResult<Value> {
    let mut out = OutputDir::create(&cfg.out_dir, "train")?;
    out.write_config(cfg)?;
    let mut train = load_dataset(&cfg.dataset, Split::Train, cfg.data_dir.as_deref())?;
    if let Some(n) = cfg.train_limit {
        train = train.take(n.min(train.len()));
    }
    let test = load_dataset(&cfg.dataset, Split::Test, cfg.data_dir.as_deref())?;
    let mut ck = train_with(&build_reference_cnn(), &train, &cfg.training, |r| {
        eprintln!(
            "{}",
            json!({"epoch": r.epoch, "train_loss": r.train_loss, "val_loss": r.val_loss, "val_accuracy": r.val_accuracy})
        );
    })?;
    let acc = accuracy(&ck.graph, &test)?;
    ck.metadata.dataset = cfg.dataset.to_ascii_lowercase();
    ck.metadata.final_accuracy = Some(acc);
    let path = out.path(&cfg.out);
    ck.save(&path)?;
    out.record(path.clone());
    let history: Vec<HistoryRow> = ck
        .metadata
        .history
        .iter()
        .map(|r| HistoryRow {
            epoch: r.epoch,
            train_loss: r.train_loss,
            val_loss: r.val_loss,
            val_accuracy: r.val_accuracy,
        })
        .collect();
    let hist_path = out.path("train_history.csv");
    write_csv(&hist_path, &history)?;
    out.record(hist_path);
    out.finish()?;
    Ok(json!({
        "checkpoint": path,
        "dataset": ck.metadata.dataset,
        "epochs": ck.metadata.epochs,
        "best_epoch": ck.metadata.best_epoch,
        "test_accuracy": acc,
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainRun {
    pub ckpt: String,
    pub dataset: Option<String>,
    pub image_index: usize,
    pub method: String,
    #[serde(deserialize_with = "config::list")]
    pub members: Vec<String>,
    pub class: Option<usize>,
    pub epsilon: Option<f64>,
    pub epsilon_multiplier: f64,
    /// Test images used to calibrate the agg-var epsilon.
    pub calibration_images: usize,
    pub out: String,
    /// Also write a PNG rendering next to the heatmap.
    pub render: bool,
    /// Clip the rendering at the 99th percentile.
    pub clip: bool,
    pub seed: u64,
    pub out_dir: String,
    pub data_dir: Option<String>,
    pub explain: ExplainConfig,
}

impl Default for ExplainRun {
    fn default() -> Self {
        Self {
            ckpt: String::new(),
            dataset: None,
            image_index: 0,
            method: "sm".into(),
            members: default_members(),
            class: None,
            epsilon: None,
            epsilon_multiplier: xagg_core::aggregate::DEFAULT_EPSILON_MULTIPLIER,
            calibration_images: 100,
            out: "heatmap.xagh".into(),
            render: true,
            clip: false,
            seed: 0,
            out_dir: ".".into(),
            data_dir: None,
            explain: ExplainConfig::default(),
        }
    }
}

pub fn run_explain(cfg: &ExplainRun) -> CliResult<Value> {
    let method: EvalMethod = cfg.method.parse()?;
    if matches!(method, EvalMethod::Random | EvalMethod::Sobel) {
        return Err(CliError::usage(format!("{method} is a baseline, not an explanation method")));
    }
    let members = if method.is_aggregate() {
        parse_members(&cfg.members)?
    } else {
        Vec::new()
    };
    let ck = load_checkpoint(&cfg.ckpt)?;
    let ds = load_dataset(&dataset_for(&cfg.dataset, &ck)?, Split::Test, cfg.data_dir.as_deref())?;
    if cfg.image_index >= ds.len() {
        return Err(CliError::usage(format!("image index {} ≥ {} test images", cfg.image_index, ds.len())));
    }
    let mut out = OutputDir::create(&cfg.out_dir, "explain")?;
    out.write_config(cfg)?;
    let setup = ExplainSetup {
        graph: &ck.graph,
        cfg: &cfg.explain,
        seed: cfg.seed,
        members,
    };
    let singles = setup.required_singles(&[method]);
    let mut im = setup.image_maps(&ds, cfg.image_index, &[])?;
    let predicted = im.class;
    if let Some(c) = cfg.class {
        if c >= ck.graph.num_classes() {
            return Err(CliError::usage(format!("class {c} ≥ {} model outputs", ck.graph.num_classes())));
        }
        im.class = c;
    }
    for m in &singles {
        let e = xagg_core::explain::explain(&ck.graph, &im.x, im.class, *m, &cfg.explain, cfg.seed, im.index as u64)?;
        im.singles.insert(*m, e);
    }
    let var = if method == EvalMethod::AggVar {
        Some(match cfg.epsilon {
            Some(e) => xagg_core::aggregate::AggVarConfig::new(e)?,
            None => {
                let n = cfg.calibration_images.clamp(1, ds.len());
                let calib = setup.all_image_maps(&ds, &(0..n).collect::<Vec<_>>(), &setup.members, 1)?;
                setup.epsilon(&calib, cfg.epsilon_multiplier)?
            }
        })
    } else {
        None
    };
    let mut map = setup.build(method, &im, var.as_ref())?;
    map.provenance.model = cfg.ckpt.clone();
    let path = out.path(&cfg.out);
    map.save(&path)?;
    out.record(path.clone());
    if cfg.render {
        let png = path.with_extension("png");
        map.write_png(&png, cfg.clip)?;
        out.record(png);
    }
    let probs = ck.graph.forward(&im.x)?.probabilities;
    out.finish()?;
    Ok(json!({
        "heatmap": path,
        "method": method.id(),
        "image_index": cfg.image_index,
        "label": ds.label(cfg.image_index),
        "predicted_class": predicted,
        "explained_class": im.class,
        "probabilities": probs,
        "epsilon": var.map(|v| v.epsilon),
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IrofRun {
    pub ckpt: String,
    pub dataset: Option<String>,
    #[serde(deserialize_with = "config::list")]
    pub methods: Vec<String>,
    /// Append the random and Sobel baselines.
    pub baselines: bool,
    #[serde(deserialize_with = "config::list")]
    pub members: Vec<String>,
    pub n_images: usize,
    pub image_offset: usize,
    pub segments: SegmentKind,
    pub grid_cell: usize,
    pub fill: Fill,
    pub steps: Option<usize>,
    pub epsilon: Option<f64>,
    pub epsilon_multiplier: f64,
    pub csv: String,
    pub seed: u64,
    pub jobs: usize,
    pub out_dir: String,
    pub data_dir: Option<String>,
    pub explain: ExplainConfig,
}

impl Default for IrofRun {
    fn default() -> Self {
        Self {
            ckpt: String::new(),
            dataset: None,
            methods: strings(&["sm", "gb", "ig", "sg", "gc", "lrp", "agg-mean", "agg-var"]),
            baselines: true,
            members: default_members(),
            n_images: 100,
            image_offset: 0,
            segments: SegmentKind::Slic,
            grid_cell: 4,
            fill: Fill::Mean,
            steps: None,
            epsilon: None,
            epsilon_multiplier: xagg_core::aggregate::DEFAULT_EPSILON_MULTIPLIER,
            csv: "irof.csv".into(),
            seed: 0,
            jobs: 1,
            out_dir: ".".into(),
            data_dir: None,
            explain: ExplainConfig::default(),
        }
    }
}

impl IrofRun {
    pub fn settings(&self) -> IrofSettings {
        IrofSettings {
            segments: self.segments,
            grid_cell: self.grid_cell,
            slic: self.explain.slic,
            fill: self.fill,
            steps: self.steps,
        }
    }
}

/// Requested methods plus the baselines when enabled, members when needed.
fn resolve_methods(methods: &[String], baselines: bool, members: &[String]) -> CliResult<(Vec<EvalMethod>, Vec<Method>)> {
    let mut list = parse_methods(methods)?;
    if baselines {
        for b in [EvalMethod::Random, EvalMethod::Sobel] {
            if !list.contains(&b) {
                list.push(b);
            }
        }
    }
    let members = if list.iter().any(EvalMethod::is_aggregate) {
        parse_members(members)?
    } else {
        Vec::new()
    };
    Ok((list, members))
}

pub fn run_irof(cfg: &IrofRun) -> CliResult<Value> {
    let (methods, members) = resolve_methods(&cfg.methods, cfg.baselines, &cfg.members)?;
    let ck = load_checkpoint(&cfg.ckpt)?;
    let ds = load_dataset(&dataset_for(&cfg.dataset, &ck)?, Split::Test, cfg.data_dir.as_deref())?;
    let indices = select(&ds, cfg.image_offset, cfg.n_images)?;
    let mut out = OutputDir::create(&cfg.out_dir, "eval-irof")?;
    out.write_config(cfg)?;
    let setup = ExplainSetup {
        graph: &ck.graph,
        cfg: &cfg.explain,
        seed: cfg.seed,
        members,
    };
    let table = irof_table(
        &setup,
        &ds,
        &indices,
        &methods,
        &cfg.settings(),
        cfg.epsilon,
        cfg.epsilon_multiplier,
        cfg.jobs,
    )?;
    let csv = out.path(&cfg.csv);
    write_csv(&csv, &table.rows)?;
    out.record(csv.clone());
    let summary = json!({
        "csv": csv,
        "summary": table.summary(),
        "skipped": table.skipped,
        "epsilon": table.epsilon,
    });
    out.write_json("irof_summary.json", &summary)?;
    out.finish()?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensnRun {
    pub ckpt: String,
    pub dataset: Option<String>,
    #[serde(deserialize_with = "config::list")]
    pub methods: Vec<String>,
    pub baselines: bool,
    #[serde(deserialize_with = "config::list")]
    pub members: Vec<String>,
    pub n_images: usize,
    pub image_offset: usize,
    pub n_grid: usize,
    pub grid_min: usize,
    pub grid_max: usize,
    pub subsets: usize,
    /// Measure output drops on the logit rather than the probability.
    pub use_logit: bool,
    pub epsilon: Option<f64>,
    pub epsilon_multiplier: f64,
    pub csv: String,
    pub seed: u64,
    pub jobs: usize,
    pub out_dir: String,
    pub data_dir: Option<String>,
    pub explain: ExplainConfig,
}

impl Default for SensnRun {
    fn default() -> Self {
        Self {
            ckpt: String::new(),
            dataset: None,
            methods: strings(&["sm", "gb", "ig", "sg", "gc", "lrp", "agg-mean", "agg-var"]),
            baselines: true,
            members: default_members(),
            n_images: 50,
            image_offset: 0,
            n_grid: 15,
            grid_min: 10,
            grid_max: 780,
            subsets: 100,
            use_logit: true,
            epsilon: None,
            epsilon_multiplier: xagg_core::aggregate::DEFAULT_EPSILON_MULTIPLIER,
            csv: "sensn.csv".into(),
            seed: 0,
            jobs: 1,
            out_dir: ".".into(),
            data_dir: None,
            explain: ExplainConfig::default(),
        }
    }
}

pub fn run_sensn(cfg: &SensnRun) -> CliResult<Value> {
    let (methods, members) = resolve_methods(&cfg.methods, cfg.baselines, &cfg.members)?;
    let ck = load_checkpoint(&cfg.ckpt)?;
    let ds = load_dataset(&dataset_for(&cfg.dataset, &ck)?, Split::Test, cfg.data_dir.as_deref())?;
    let indices = select(&ds, cfg.image_offset, cfg.n_images)?;
    let sens = SensitivityConfig {
        grid: log_grid(cfg.grid_min, cfg.grid_max, cfg.n_grid)?,
        subsets: cfg.subsets,
        seed: cfg.seed,
        use_logit: cfg.use_logit,
    };
    let mut out = OutputDir::create(&cfg.out_dir, "eval-sensn")?;
    out.write_config(cfg)?;
    let setup = ExplainSetup {
        graph: &ck.graph,
        cfg: &cfg.explain,
        seed: cfg.seed,
        members,
    };
    let rows = sensn_table(&setup, &ds, &indices, &methods, &sens, cfg.epsilon, cfg.epsilon_multiplier, cfg.jobs)?;
    let csv = out.path(&cfg.csv);
    write_csv(&csv, &rows)?;
    out.record(csv.clone());
    out.finish()?;
    let mut curves: BTreeMap<String, Vec<Option<f64>>> = BTreeMap::new();
    for r in &rows {
        curves.entry(r.method.clone()).or_default().push(r.mean_pcc);
    }
    Ok(json!({ "csv": csv, "grid": sens.grid, "mean_pcc": curves }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairwiseRun {
    pub ckpt: String,
    pub dataset: Option<String>,
    #[serde(deserialize_with = "config::list")]
    pub methods: Vec<String>,
    pub n_images: usize,
    pub image_offset: usize,
    pub segments: SegmentKind,
    pub grid_cell: usize,
    pub fill: Fill,
    pub steps: Option<usize>,
    pub csv: String,
    pub seed: u64,
    pub jobs: usize,
    pub out_dir: String,
    pub data_dir: Option<String>,
    pub explain: ExplainConfig,
}

impl Default for PairwiseRun {
    fn default() -> Self {
        Self {
            ckpt: String::new(),
            dataset: None,
            methods: default_members(),
            n_images: 100,
            image_offset: 0,
            segments: SegmentKind::Slic,
            grid_cell: 4,
            fill: Fill::Mean,
            steps: None,
            csv: "pairwise_ratio.csv".into(),
            seed: 0,
            jobs: 1,
            out_dir: ".".into(),
            data_dir: None,
            explain: ExplainConfig::default(),
        }
    }
}

pub fn run_pairwise(cfg: &PairwiseRun) -> CliResult<Value> {
    let methods: Vec<Method> = parse_members(&cfg.methods)?;
    let ck = load_checkpoint(&cfg.ckpt)?;
    let ds = load_dataset(&dataset_for(&cfg.dataset, &ck)?, Split::Test, cfg.data_dir.as_deref())?;
    let indices = select(&ds, cfg.image_offset, cfg.n_images)?;
    let mut out = OutputDir::create(&cfg.out_dir, "pairwise")?;
    out.write_config(cfg)?;
    let setup = ExplainSetup {
        graph: &ck.graph,
        cfg: &cfg.explain,
        seed: cfg.seed,
        members: Vec::new(),
    };
    let settings = IrofSettings {
        segments: cfg.segments,
        grid_cell: cfg.grid_cell,
        slic: cfg.explain.slic,
        fill: cfg.fill,
        steps: cfg.steps,
    };
    let table = pairwise_table(&setup, &ds, &indices, &methods, &settings, cfg.jobs)?;
    let csv = out.path(&cfg.csv);
    write_csv(&csv, &table.rows)?;
    out.record(csv.clone());
    out.write_json("pairwise_summary.json", &table)?;
    out.finish()?;
    Ok(json!({ "csv": csv, "ratios": table.rows, "singles": table.singles, "skipped": table.skipped }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Gd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    Target,
    Blank,
}

/// Optimization settings shared by `attack` and `transfer`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackParams {
    pub iters: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub beta_start: f64,
    pub beta_end: f64,
    pub explanation_weight: f64,
    /// `None` balances the output term against the initial explanation loss.
    pub output_weight: Option<f64>,
    /// Defaults to 1000, or half the dataset when it is smaller.
    pub target_offset: Option<usize>,
}

impl Default for AttackParams {
    fn default() -> Self {
        let base = AttackConfig::default();
        Self {
            iters: base.iterations,
            lr: base.lr,
            optimizer: match base.optimizer {
                Optimizer::GradientDescent => OptimizerKind::Gd,
                Optimizer::Adam { .. } => OptimizerKind::Adam,
            },
            beta_start: base.beta_start,
            beta_end: base.beta_end,
            explanation_weight: base.explanation_weight,
            output_weight: base.output_weight,
            target_offset: None,
        }
    }
}

impl AttackParams {
    pub fn config(&self, seed: u64, explain: &ExplainConfig) -> CliResult<AttackConfig> {
        let cfg = AttackConfig {
            iterations: self.iters,
            lr: self.lr,
            optimizer: match self.optimizer {
                OptimizerKind::Adam => Optimizer::adam(),
                OptimizerKind::Gd => Optimizer::GradientDescent,
            },
            beta_start: self.beta_start,
            beta_end: self.beta_end,
            explanation_weight: self.explanation_weight,
            output_weight: self.output_weight,
            seed,
            explain: explain.clone(),
            ..Default::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `(image, target image)` pairs; the target wraps around the dataset.
    pub fn pairs(&self, ds: &Dataset, indices: &[usize]) -> CliResult<Vec<(usize, usize)>> {
        let offset = self.target_offset.unwrap_or(if ds.len() > 2000 { 1000 } else { ds.len() / 2 });
        if offset.is_multiple_of(ds.len()) {
            return Err(CliError::usage("target_offset must not map an image onto itself"));
        }
        Ok(indices.iter().map(|&i| (i, (i + offset) % ds.len())).collect())
    }
}

fn parse_explainers(items: &[String]) -> CliResult<Vec<Explainer>> {
    if items.is_empty() {
        return Err(CliError::usage("no explainers to attack"));
    }
    items
        .iter()
        .map(|s| s.parse::<Explainer>().map_err(|e| CliError::usage(e.to_string())))
        .collect()
}

fn parse_singles(items: &[String]) -> CliResult<Vec<Method>> {
    items
        .iter()
        .map(|s| s.trim().parse::<Method>().map_err(|_| CliError::usage(format!("unknown method {s:?}"))))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackRun {
    pub ckpt: String,
    pub dataset: Option<String>,
    #[serde(deserialize_with = "config::list")]
    pub attacked: Vec<String>,
    pub objective: ObjectiveKind,
    pub n_images: usize,
    pub image_offset: usize,
    /// Side of the centred square for the blank objective.
    pub blank_side: usize,
    #[serde(flatten)]
    pub params: AttackParams,
    /// Defaults to attack_runs.csv or blank_runs.csv by objective.
    pub csv: Option<String>,
    /// Write original, adversarial and target maps of every run under `heatmaps/`.
    pub save_heatmaps: bool,
    pub seed: u64,
    pub jobs: usize,
    pub out_dir: String,
    pub data_dir: Option<String>,
    pub explain: ExplainConfig,
}

impl Default for AttackRun {
    fn default() -> Self {
        Self {
            ckpt: String::new(),
            dataset: None,
            attacked: strings(&["sm", "gb", "lrp", "agg-mean"]),
            objective: ObjectiveKind::Target,
            n_images: 20,
            image_offset: 0,
            blank_side: 14,
            params: AttackParams::default(),
            csv: None,
            save_heatmaps: true,
            seed: 0,
            jobs: 1,
            out_dir: ".".into(),
            data_dir: None,
            explain: ExplainConfig::default(),
        }
    }
}

/// Mean metric_diff per attacked explainer and metric, plus input-space stats.
pub fn attack_summary(rows: &[AttackRow]) -> Value {
    let mut explainers: Vec<&str> = Vec::new();
    for r in rows {
        if !explainers.contains(&r.attacked_method.as_str()) {
            explainers.push(&r.attacked_method);
        }
    }
    let per: Vec<Value> = explainers
        .iter()
        .map(|e| {
            let mine: Vec<&AttackRow> = rows.iter().filter(|r| r.attacked_method == *e).collect();
            let diffs = summarize_rows(mine.iter().map(|r| (r.metric.as_str(), r.metric_diff)));
            let first_metric = mine.first().map(|r| r.metric.clone()).unwrap_or_default();
            let per_image: Vec<&&AttackRow> = mine.iter().filter(|r| r.metric == first_metric).collect();
            let n = per_image.len().max(1) as f64;
            json!({
                "attacked": e,
                "metric_diff": diffs,
                "mean_input_mse": per_image.iter().map(|r| r.input_mse).sum::<f64>() / n,
                "max_input_mse": per_image.iter().map(|r| r.input_mse).fold(0.0, f64::max),
                "label_preserved": per_image.iter().filter(|r| r.label_preserved).count() as f64 / n,
            })
        })
        .collect();
    Value::Array(per)
}

/// `heatmaps/<explainer>_<image>_{orig,adv,target}.xagh` for every run.
fn write_attack_maps(out: &mut OutputDir, maps: &[AttackMaps]) -> CliResult<()> {
    std::fs::create_dir_all(out.path("heatmaps"))?;
    for m in maps {
        let stem = format!("heatmaps/{}_{:05}", m.explainer.replace([':', '+'], "_"), m.image_id);
        for (kind, map) in [("orig", Some(&m.orig)), ("adv", Some(&m.adv)), ("target", m.target.as_ref())] {
            if let Some(map) = map {
                let path = out.path(&format!("{stem}_{kind}.xagh"));
                map.save(&path)?;
                out.record(path);
            }
        }
    }
    Ok(())
}

pub fn run_attack(cfg: &AttackRun) -> CliResult<Value> {
    let explainers = parse_explainers(&cfg.attacked)?;
    let ck = load_checkpoint(&cfg.ckpt)?;
    let ds = load_dataset(&dataset_for(&cfg.dataset, &ck)?, Split::Test, cfg.data_dir.as_deref())?;
    let indices = select(&ds, cfg.image_offset, cfg.n_images)?;
    let attack_cfg = cfg.params.config(cfg.seed, &cfg.explain)?;
    let mut out = OutputDir::create(&cfg.out_dir, "attack")?;
    out.write_config(cfg)?;
    let summary = match cfg.objective {
        ObjectiveKind::Target => {
            let pairs = cfg.params.pairs(&ds, &indices)?;
            let outcome = attack_runs(&ck.graph, &ds, &explainers, &[], &pairs, &attack_cfg, cfg.jobs)?;
            let csv = out.path(cfg.csv.as_deref().unwrap_or("attack_runs.csv"));
            write_csv(&csv, &outcome.self_rows)?;
            out.record(csv.clone());
            if cfg.save_heatmaps {
                write_attack_maps(&mut out, &outcome.maps)?;
            }
            json!({ "csv": csv, "objective": "target", "explainers": attack_summary(&outcome.self_rows) })
        }
        ObjectiveKind::Blank => {
            let rows = blank_runs(&ck.graph, &ds, &explainers, &indices, cfg.blank_side, &attack_cfg, cfg.jobs)?;
            let csv = out.path(cfg.csv.as_deref().unwrap_or("blank_runs.csv"));
            write_csv(&csv, &rows)?;
            out.record(csv.clone());
            let preserved = summarize_rows(rows.iter().map(|r| (r.attacked_method.as_str(), r.preserved)));
            json!({ "csv": csv, "objective": "blank", "preserved": preserved })
        }
    };
    out.write_json("attack_summary.json", &summary)?;
    out.finish()?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransferRun {
    pub ckpt: String,
    pub dataset: Option<String>,
    #[serde(deserialize_with = "config::list")]
    pub attacked_set: Vec<String>,
    #[serde(deserialize_with = "config::list")]
    pub eval_set: Vec<String>,
    pub n_images: usize,
    pub image_offset: usize,
    #[serde(flatten)]
    pub params: AttackParams,
    pub csv: String,
    pub save_heatmaps: bool,
    pub seed: u64,
    pub jobs: usize,
    pub out_dir: String,
    pub data_dir: Option<String>,
    pub explain: ExplainConfig,
}

impl Default for TransferRun {
    fn default() -> Self {
        Self {
            ckpt: String::new(),
            dataset: None,
            attacked_set: strings(&["sm", "gb", "lrp"]),
            eval_set: strings(&["sm", "gb", "lrp"]),
            n_images: 20,
            image_offset: 0,
            params: AttackParams::default(),
            csv: "transfer.csv".into(),
            save_heatmaps: true,
            seed: 0,
            jobs: 1,
            out_dir: ".".into(),
            data_dir: None,
            explain: ExplainConfig::default(),
        }
    }
}

/// Per ordered pair (A attacked, B evaluated, B ≠ A): the fraction of images
/// where the `metric` diff on B is below the diff on A itself.
pub fn transfer_fractions(rows: &[AttackRow], metric: Similarity) -> Vec<Value> {
    let key = metric.id();
    let mut by_image: BTreeMap<(&str, usize), BTreeMap<&str, f64>> = BTreeMap::new();
    let mut attacked: Vec<&str> = Vec::new();
    let mut evaluated: Vec<&str> = Vec::new();
    for r in rows.iter().filter(|r| r.metric == key) {
        by_image
            .entry((r.attacked_method.as_str(), r.image_id))
            .or_default()
            .insert(r.evaluated_method.as_str(), r.metric_diff);
        if !attacked.contains(&r.attacked_method.as_str()) {
            attacked.push(&r.attacked_method);
        }
        if !evaluated.contains(&r.evaluated_method.as_str()) {
            evaluated.push(&r.evaluated_method);
        }
    }
    let mut out = Vec::new();
    for a in &attacked {
        for b in evaluated.iter().filter(|b| *b != a) {
            let (mut below, mut total) = (0usize, 0usize);
            for ((att, _), diffs) in &by_image {
                if att != a {
                    continue;
                }
                if let (Some(da), Some(db)) = (diffs.get(a), diffs.get(b)) {
                    total += 1;
                    if db < da {
                        below += 1;
                    }
                }
            }
            if total > 0 {
                out.push(json!({
                    "attacked": a,
                    "evaluated": b,
                    "metric": key,
                    "images": total,
                    "fraction_below_attacked": below as f64 / total as f64,
                }));
            }
        }
    }
    out
}

pub fn run_transfer(cfg: &TransferRun) -> CliResult<Value> {
    let attacked = parse_explainers(&cfg.attacked_set)?;
    let evaluated = parse_singles(&cfg.eval_set)?;
    if evaluated.is_empty() {
        return Err(CliError::usage("eval_set is empty"));
    }
    let ck = load_checkpoint(&cfg.ckpt)?;
    let ds = load_dataset(&dataset_for(&cfg.dataset, &ck)?, Split::Test, cfg.data_dir.as_deref())?;
    let indices = select(&ds, cfg.image_offset, cfg.n_images)?;
    let pairs = cfg.params.pairs(&ds, &indices)?;
    let attack_cfg = cfg.params.config(cfg.seed, &cfg.explain)?;
    let mut out = OutputDir::create(&cfg.out_dir, "transfer")?;
    out.write_config(cfg)?;
    let outcome = attack_runs(&ck.graph, &ds, &attacked, &evaluated, &pairs, &attack_cfg, cfg.jobs)?;
    let csv = out.path(&cfg.csv);
    write_csv(&csv, &outcome.transfer_rows)?;
    out.record(csv.clone());
    if cfg.save_heatmaps {
        write_attack_maps(&mut out, &outcome.maps)?;
    }
    let cells = xagg_core::attack::transfer_cells(&attacked, &evaluated, &outcome.transfer_rows);
    let matrix: Vec<Value> = cells
        .iter()
        .map(|c| json!({ "attacked": c.attacked, "evaluated": c.evaluated, "mean_diff": c.mean_diff }))
        .collect();
    let summary = json!({
        "csv": csv,
        "matrix": matrix,
        "pcc_fractions": transfer_fractions(&outcome.transfer_rows, Similarity::Pcc),
    });
    out.write_json("transfer_summary.json", &summary)?;
    out.finish()?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecomposeRun {
    #[serde(flatten)]
    pub settings: DecomposeSettings,
    pub out: String,
    pub out_dir: String,
}

impl Default for DecomposeRun {
    fn default() -> Self {
        Self {
            settings: DecomposeSettings::default(),
            out: "decompose.json".into(),
            out_dir: ".".into(),
        }
    }
}

pub fn run_decompose(cfg: &DecomposeRun) -> CliResult<Value> {
    let mut out = OutputDir::create(&cfg.out_dir, "decompose")?;
    out.write_config(cfg)?;
    let report = decompose_trials(&cfg.settings)?;
    out.write_json(&cfg.out, &report)?;
    out.finish()?;
    if !report.passed() {
        return Err(CliError::runtime(format!(
            "decomposition check failed: max |residual| {:e}, {} inequality and {} strictness violations",
            report.max_abs_identity_residual, report.inequality_violations, report.strictness_violations
        )));
    }
    Ok(serde_json::to_value(report)?)
}

fn resolve<T>(name: &str, config: Option<&Path>, flags: &impl Serialize) -> CliResult<T>
where
    T: Serialize + serde::de::DeserializeOwned + Default,
{
    config::resolve(name, &Layers::from_process(config, flags)?)
}

/// Resolves the configuration of the parsed command and runs it.
pub fn run(cli: Cli) -> CliResult<Value> {
    let name = cli.command.name();
    match &cli.command {
        Command::Train(a) => run_train(&resolve(name, a.common.config.as_deref(), a)?),
        Command::Explain(a) => run_explain(&resolve(name, a.common.config.as_deref(), a)?),
        Command::EvalIrof(a) => run_irof(&resolve(name, a.common.config.as_deref(), a)?),
        Command::EvalSensn(a) => run_sensn(&resolve(name, a.common.config.as_deref(), a)?),
        Command::Pairwise(a) => run_pairwise(&resolve(name, a.common.config.as_deref(), a)?),
        Command::Attack(a) => run_attack(&resolve(name, a.common.config.as_deref(), a)?),
        Command::Transfer(a) => run_transfer(&resolve(name, a.common.config.as_deref(), a)?),
        Command::Decompose(a) => run_decompose(&resolve(name, a.common.config.as_deref(), a)?),
    }
}
