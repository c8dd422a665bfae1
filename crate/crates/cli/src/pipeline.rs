//! Dataset-level experiment drivers shared by the subcommands and tests.
//! Work is split per image (or per attack); results come back in index
//! order whatever the job count.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use xagg_core::aggregate::{
    agg_mean, agg_var, decompose_mse, epsilon_from_dataset, AggVarConfig, HeatmapStack, SyntheticTruthCase,
};
use xagg_core::attack::{
    attack, attack_and_evaluate, attack_blank_region, centered_square, reference_explanation, AttackConfig,
    AttackResult, Explainer,
};
use xagg_core::data::Dataset;
use xagg_core::evaluate::report::{AttackRow, IrofRow, PairwiseRow, SensnRow};
use xagg_core::evaluate::{irof, random_baseline, sensitivity_n_image, sobel_baseline, summarize_sensitivity, SensitivityConfig};
use xagg_core::explain::{explain, ExplainConfig, Method};
use xagg_core::heatmap::Heatmap;
use xagg_core::segment::{grid_segments, slic, SegmentMap, SlicConfig};
use xagg_core::tensor::{Graph, ImageTensor};
use xagg_core::Error as CoreError;

use crate::error::{CliError, CliResult};

/// Runs `f(0..n)` on `jobs` threads, returning results in index order.
pub fn run_indexed<T, F>(jobs: usize, n: usize, f: F) -> CliResult<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> CliResult<T> + Sync + Send,
{
    if jobs <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::runtime(format!("thread pool: {e}")))?;
    pool.install(|| (0..n).into_par_iter().map(&f).collect())
}

/// Independent seed for `(stream, index)` under a run seed.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(stream);
    rng.next_u64()
}

const RANDOM_BASELINE_STREAM: u64 = 0x5241_4e44;

/// Anything that can be scored per image: a single method, an aggregate of
/// the configured members, or a non-informative baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EvalMethod {
    Single(Method),
    AggMean,
    AggVar,
    Random,
    Sobel,
}

impl EvalMethod {
    pub fn id(&self) -> &'static str {
        match self {
            EvalMethod::Single(m) => m.id(),
            EvalMethod::AggMean => "agg-mean",
            EvalMethod::AggVar => "agg-var",
            EvalMethod::Random => "random",
            EvalMethod::Sobel => "sobel",
        }
    }

    pub fn is_aggregate(&self) -> bool {
        matches!(self, EvalMethod::AggMean | EvalMethod::AggVar)
    }
}

impl fmt::Display for EvalMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for EvalMethod {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "agg-mean" => Ok(EvalMethod::AggMean),
            "agg-var" => Ok(EvalMethod::AggVar),
            "random" => Ok(EvalMethod::Random),
            "sobel" => Ok(EvalMethod::Sobel),
            other => other
                .parse::<Method>()
                .map(EvalMethod::Single)
                .map_err(|_| CliError::usage(format!("unknown method {other:?}"))),
        }
    }
}

pub fn parse_methods(items: &[String]) -> CliResult<Vec<EvalMethod>> {
    let out: Vec<EvalMethod> = items.iter().map(|s| s.parse()).collect::<CliResult<_>>()?;
    if out.is_empty() {
        return Err(CliError::usage("no methods given"));
    }
    for (i, m) in out.iter().enumerate() {
        if out[..i].contains(m) {
            return Err(CliError::usage(format!("method {m} listed twice")));
        }
    }
    Ok(out)
}

/// Aggregate members: at least two distinct single methods.
pub fn parse_members(items: &[String]) -> CliResult<Vec<Method>> {
    let members: Vec<Method> = items
        .iter()
        .map(|s| s.trim().parse::<Method>().map_err(|_| CliError::usage(format!("unknown member method {s:?}"))))
        .collect::<CliResult<_>>()?;
    if members.len() < 2 {
        return Err(CliError::usage(format!(
            "an aggregate needs at least 2 member methods, got {}",
            members.len()
        )));
    }
    for (i, m) in members.iter().enumerate() {
        if members[..i].contains(m) {
            return Err(CliError::usage(format!("member {m} listed twice")));
        }
    }
    Ok(members)
}

/// Shared explanation settings for a run.
pub struct ExplainSetup<'a> {
    pub graph: &'a Graph,
    pub cfg: &'a ExplainConfig,
    pub seed: u64,
    pub members: Vec<Method>,
}

/// One evaluated image with its predicted class and raw single-method maps.
pub struct ImageMaps {
    pub index: usize,
    pub x: ImageTensor,
    pub class: usize,
    pub singles: BTreeMap<Method, Heatmap>,
}

impl ImageMaps {
    fn member_stack(&self, members: &[Method]) -> CliResult<HeatmapStack> {
        let maps: Vec<Heatmap> = members.iter().map(|m| self.singles[m].clone()).collect();
        Ok(HeatmapStack::normalize(&maps, true)?)
    }
}

impl ExplainSetup<'_> {
    /// Single methods needed to build every entry of `methods`.
    pub fn required_singles(&self, methods: &[EvalMethod]) -> Vec<Method> {
        let mut need: Vec<Method> = Vec::new();
        for m in methods {
            match m {
                EvalMethod::Single(s) => need.push(*s),
                EvalMethod::AggMean | EvalMethod::AggVar => need.extend(&self.members),
                EvalMethod::Random | EvalMethod::Sobel => {}
            }
        }
        need.sort();
        need.dedup();
        need
    }

    pub fn image_maps(&self, ds: &Dataset, index: usize, singles: &[Method]) -> CliResult<ImageMaps> {
        let x = ds.image(index);
        let class = self.graph.forward(&x)?.class();
        let maps = singles
            .iter()
            .map(|&m| Ok((m, explain(self.graph, &x, class, m, self.cfg, self.seed, index as u64)?)))
            .collect::<CliResult<_>>()?;
        Ok(ImageMaps {
            index,
            x,
            class,
            singles: maps,
        })
    }

    pub fn all_image_maps(&self, ds: &Dataset, indices: &[usize], singles: &[Method], jobs: usize) -> CliResult<Vec<ImageMaps>> {
        run_indexed(jobs, indices.len(), |k| self.image_maps(ds, indices[k], singles))
    }

    /// ε = multiplier × mean across-member σ over the given images.
    pub fn epsilon(&self, images: &[ImageMaps], multiplier: f64) -> CliResult<AggVarConfig> {
        let sigmas = images
            .iter()
            .map(|im| Ok(im.member_stack(&self.members)?.std()))
            .collect::<CliResult<Vec<_>>>()?;
        Ok(epsilon_from_dataset(&sigmas, multiplier)?)
    }

    /// The heatmap scored for `method` on one image.
    pub fn build(&self, method: EvalMethod, im: &ImageMaps, var: Option<&AggVarConfig>) -> CliResult<Heatmap> {
        let (h, w) = (im.x.shape().height, im.x.shape().width);
        let mut map = match method {
            EvalMethod::Single(m) => im.singles[&m].clone(),
            EvalMethod::AggMean => agg_mean(&im.member_stack(&self.members)?),
            EvalMethod::AggVar => {
                let cfg = var.ok_or_else(|| CliError::runtime("agg-var needs a calibrated epsilon"))?;
                agg_var(&im.member_stack(&self.members)?, cfg)?
            }
            EvalMethod::Random => random_baseline(h, w, derive_seed(self.seed, RANDOM_BASELINE_STREAM, im.index as u64)),
            EvalMethod::Sobel => sobel_baseline(&im.x)?,
        };
        map.provenance.image = Some(im.index);
        map.provenance.class = Some(im.class);
        Ok(map)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentKind {
    Slic,
    Grid,
}

/// Replacement value for removed segments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fill {
    /// Per-channel dataset mean.
    Mean,
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IrofSettings {
    pub segments: SegmentKind,
    pub grid_cell: usize,
    pub slic: SlicConfig,
    pub fill: Fill,
    pub steps: Option<usize>,
}

impl Default for IrofSettings {
    fn default() -> Self {
        Self {
            segments: SegmentKind::Slic,
            grid_cell: 4,
            slic: SlicConfig::default(),
            fill: Fill::Mean,
            steps: None,
        }
    }
}

impl IrofSettings {
    pub fn segment(&self, x: &ImageTensor) -> CliResult<SegmentMap> {
        Ok(match self.segments {
            SegmentKind::Slic => slic(x, &self.slic)?,
            SegmentKind::Grid => grid_segments(x.shape().height, x.shape().width, self.grid_cell)?,
        })
    }

    pub fn fill_values(&self, ds: &Dataset) -> Vec<f64> {
        match self.fill {
            Fill::Mean => ds.channel_mean().to_vec(),
            Fill::Zero => vec![0.0; ds.shape().channels],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedImage {
    pub image_id: usize,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub mean: f64,
    pub std_error: f64,
    pub images: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IrofTable {
    /// Method-major, images in evaluation order.
    pub rows: Vec<IrofRow>,
    pub skipped: Vec<SkippedImage>,
    pub epsilon: Option<f64>,
}

impl IrofTable {
    pub fn summary(&self) -> Vec<MethodSummary> {
        summarize_rows(self.rows.iter().map(|r| (r.method.as_str(), r.score)))
    }

    pub fn mean(&self, method: &str) -> Option<f64> {
        self.summary().into_iter().find(|s| s.method == method).map(|s| s.mean)
    }
}

/// Mean and standard error per key, keys in first-seen order.
pub fn summarize_rows<'a>(values: impl Iterator<Item = (&'a str, f64)>) -> Vec<MethodSummary> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (k, v) in values {
        if !groups.contains_key(k) {
            order.push(k);
        }
        groups.entry(k).or_default().push(v);
    }
    order
        .into_iter()
        .map(|k| {
            let v = &groups[k];
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = if v.len() > 1 {
                v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            MethodSummary {
                method: k.to_string(),
                mean,
                std_error: (var / n).sqrt(),
                images: v.len(),
            }
        })
        .collect()
}

/// Resolves ε for agg-var: the explicit value if given, else calibrated on `images`.
fn agg_var_config(
    setup: &ExplainSetup,
    methods: &[EvalMethod],
    images: &[ImageMaps],
    epsilon: Option<f64>,
    multiplier: f64,
) -> CliResult<Option<AggVarConfig>> {
    if !methods.contains(&EvalMethod::AggVar) {
        return Ok(None);
    }
    Ok(Some(match epsilon {
        Some(e) => AggVarConfig::new(e)?,
        None => setup.epsilon(images, multiplier)?,
    }))
}

/// IROF per method and image. Images whose original class probability is 0
/// are skipped for every method and listed.
#[allow(clippy::too_many_arguments)]
pub fn irof_table(
    setup: &ExplainSetup,
    ds: &Dataset,
    indices: &[usize],
    methods: &[EvalMethod],
    settings: &IrofSettings,
    epsilon: Option<f64>,
    epsilon_multiplier: f64,
    jobs: usize,
) -> CliResult<IrofTable> {
    let images = setup.all_image_maps(ds, indices, &setup.required_singles(methods), jobs)?;
    let var = agg_var_config(setup, methods, &images, epsilon, epsilon_multiplier)?;
    let fill = settings.fill_values(ds);
    let per_image = run_indexed(jobs, images.len(), |k| {
        let im = &images[k];
        let segments = settings.segment(&im.x)?;
        let mut scores = Vec::with_capacity(methods.len());
        for &m in methods {
            let e = setup.build(m, im, var.as_ref())?;
            match irof(setup.graph, &im.x, im.class, &e, &segments, &fill, settings.steps) {
                Ok(r) => scores.push(r.score),
                Err(CoreError::UndefinedMetric(reason)) => return Ok(Err(reason)),
                Err(e) => return Err(e.into()),
            }
        }
        Ok(Ok(scores))
    })?;
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for (im, r) in images.iter().zip(&per_image) {
        if let Err(reason) = r {
            skipped.push(SkippedImage {
                image_id: im.index,
                reason: reason.clone(),
            });
        }
    }
    for (j, m) in methods.iter().enumerate() {
        for (im, r) in images.iter().zip(&per_image) {
            if let Ok(scores) = r {
                rows.push(IrofRow {
                    method: m.id().into(),
                    image_id: im.index,
                    score: scores[j],
                });
            }
        }
    }
    Ok(IrofTable {
        rows,
        skipped,
        epsilon: var.map(|v| v.epsilon),
    })
}

/// Sensitivity-n per method. Image `k` of the evaluation list draws its
/// subsets from stream `k`, the same for every method.
#[allow(clippy::too_many_arguments)]
pub fn sensn_table(
    setup: &ExplainSetup,
    ds: &Dataset,
    indices: &[usize],
    methods: &[EvalMethod],
    cfg: &SensitivityConfig,
    epsilon: Option<f64>,
    epsilon_multiplier: f64,
    jobs: usize,
) -> CliResult<Vec<SensnRow>> {
    let images = setup.all_image_maps(ds, indices, &setup.required_singles(methods), jobs)?;
    let var = agg_var_config(setup, methods, &images, epsilon, epsilon_multiplier)?;
    let per_image = run_indexed(jobs, images.len(), |k| {
        let im = &images[k];
        methods
            .iter()
            .map(|&m| {
                let e = setup.build(m, im, var.as_ref())?;
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(k as u64);
                Ok(sensitivity_n_image(setup.graph, &im.x, im.class, &e, cfg, &mut rng)?)
            })
            .collect::<CliResult<Vec<_>>>()
    })?;
    let mut rows = Vec::new();
    for (j, m) in methods.iter().enumerate() {
        let curves: Vec<Vec<Option<f64>>> = per_image.iter().map(|p| p[j].clone()).collect();
        for point in summarize_sensitivity(cfg, &curves).points {
            rows.push(SensnRow {
                method: m.id().into(),
                n: point.n,
                mean_pcc: point.mean_pcc,
                n_excluded: point.excluded,
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairwiseTable {
    pub rows: Vec<PairwiseRow>,
    /// Mean IROF of each single method.
    pub singles: Vec<MethodSummary>,
    /// Mean IROF of each two-method aggregate, keyed "a+b".
    pub pairs: Vec<MethodSummary>,
    pub skipped: Vec<SkippedImage>,
}

/// For every method pair: mean IROF of their two-method agg-mean divided by
/// the mean of their single-method IROF means.
pub fn pairwise_table(
    setup: &ExplainSetup,
    ds: &Dataset,
    indices: &[usize],
    methods: &[Method],
    settings: &IrofSettings,
    jobs: usize,
) -> CliResult<PairwiseTable> {
    if methods.len() < 2 {
        return Err(CliError::usage("pairwise comparison needs at least 2 methods"));
    }
    let images = setup.all_image_maps(ds, indices, methods, jobs)?;
    let fill = settings.fill_values(ds);
    let pairs = xagg_core::aggregate::method_pairs(methods.len());
    let per_image = run_indexed(jobs, images.len(), |k| {
        let im = &images[k];
        let segments = settings.segment(&im.x)?;
        let score = |e: &Heatmap| irof(setup.graph, &im.x, im.class, e, &segments, &fill, settings.steps).map(|r| r.score);
        let mut singles = Vec::new();
        for m in methods {
            match score(&im.singles[m]) {
                Ok(s) => singles.push(s),
                Err(CoreError::UndefinedMetric(reason)) => return Ok(Err(reason)),
                Err(e) => return Err(e.into()),
            }
        }
        let mut pair_scores = Vec::new();
        for &(a, b) in &pairs {
            let stack = HeatmapStack::normalize(&[im.singles[&methods[a]].clone(), im.singles[&methods[b]].clone()], true)?;
            pair_scores.push(score(&agg_mean(&stack))?);
        }
        Ok(Ok((singles, pair_scores)))
    })?;
    let mut skipped = Vec::new();
    let mut kept = Vec::new();
    for (im, r) in images.iter().zip(per_image) {
        match r {
            Ok(v) => kept.push(v),
            Err(reason) => skipped.push(SkippedImage {
                image_id: im.index,
                reason,
            }),
        }
    }
    if kept.is_empty() {
        return Err(CliError::runtime("every image was skipped"));
    }
    let single_keys: Vec<&str> = methods.iter().map(|m| m.id()).collect();
    let singles = summarize_rows(
        kept.iter()
            .flat_map(|(s, _)| s.iter().enumerate().map(|(j, v)| (single_keys[j], *v))),
    );
    let pair_keys: Vec<String> = pairs.iter().map(|&(a, b)| format!("{}+{}", methods[a], methods[b])).collect();
    let pair_summary = summarize_rows(
        kept.iter()
            .flat_map(|(_, p)| p.iter().enumerate().map(|(j, v)| (pair_keys[j].as_str(), *v))),
    );
    let rows = pairs
        .iter()
        .zip(&pair_summary)
        .map(|(&(a, b), p)| PairwiseRow {
            method_a: methods[a].id().into(),
            method_b: methods[b].id().into(),
            ratio: p.mean / (0.5 * (singles[a].mean + singles[b].mean)),
        })
        .collect();
    Ok(PairwiseTable {
        rows,
        singles,
        pairs: pair_summary,
        skipped,
    })
}

/// Attack outputs: rows scoring the attacked explainer itself, and rows for
/// every single method evaluated on the same adversarial inputs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttackOutcome {
    pub self_rows: Vec<AttackRow>,
    pub transfer_rows: Vec<AttackRow>,
    pub maps: Vec<AttackMaps>,
}

/// Explanations of one attack run, all on the ReLU graph.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackMaps {
    pub image_id: usize,
    pub explainer: String,
    pub orig: Heatmap,
    pub adv: Heatmap,
    pub target: Option<Heatmap>,
}

impl AttackMaps {
    fn of(image_id: usize, r: &AttackResult) -> Self {
        Self {
            image_id,
            explainer: r.explainer.id(),
            orig: r.e_orig.clone(),
            adv: r.e_adv.clone(),
            target: r.e_target.clone(),
        }
    }
}

/// Targeted attacks for every explainer × `(image, target image)` pair.
pub fn attack_runs(
    graph: &Graph,
    ds: &Dataset,
    explainers: &[Explainer],
    evaluated: &[Method],
    pairs: &[(usize, usize)],
    cfg: &AttackConfig,
    jobs: usize,
) -> CliResult<AttackOutcome> {
    let units = explainers.len() * pairs.len();
    let results = run_indexed(jobs, units, |u| {
        let e = &explainers[u / pairs.len()];
        let (i, t) = pairs[u % pairs.len()];
        let (x, target_x) = (ds.image(i), ds.image(t));
        let mut c = cfg.clone();
        c.explainer = e.clone();
        if evaluated.is_empty() {
            let target_class = graph.forward(&target_x)?.class();
            let target = reference_explanation(graph, &target_x, target_class, e, &c.explain, c.seed, i as u64)?;
            let r = attack(graph, &x, &target, &c)?;
            Ok((r.rows(i), Vec::new(), AttackMaps::of(i, &r)))
        } else {
            let (r, rows) = attack_and_evaluate(graph, &x, &target_x, i, e, evaluated, &c)?;
            Ok((r.rows(i), rows, AttackMaps::of(i, &r)))
        }
    })?;
    let mut out = AttackOutcome::default();
    for (s, t, m) in results {
        out.self_rows.extend(s);
        out.transfer_rows.extend(t);
        out.maps.push(m);
    }
    Ok(out)
}

/// One row of `blank_runs.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlankRow {
    pub image_id: usize,
    pub attacked_method: String,
    pub start_fraction: f64,
    pub end_fraction: f64,
    pub preserved: f64,
    pub input_mse: f64,
    pub label_preserved: bool,
}

/// Blank-region attacks on a centred square for every explainer × image.
pub fn blank_runs(
    graph: &Graph,
    ds: &Dataset,
    explainers: &[Explainer],
    images: &[usize],
    side: usize,
    cfg: &AttackConfig,
    jobs: usize,
) -> CliResult<Vec<BlankRow>> {
    let shape = ds.shape();
    let mask = centered_square(shape.height, shape.width, side);
    run_indexed(jobs, explainers.len() * images.len(), |u| {
        let e = &explainers[u / images.len()];
        let i = images[u % images.len()];
        let mut c = cfg.clone();
        c.explainer = e.clone();
        let r = attack_blank_region(graph, &ds.image(i), &mask, &c)?;
        Ok(BlankRow {
            image_id: i,
            attacked_method: e.id(),
            start_fraction: r.start_fraction,
            end_fraction: r.end_fraction,
            preserved: r.preserved,
            input_mse: r.attack.input_mse,
            label_preserved: r.attack.label_preserved,
        })
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecomposeSettings {
    pub trials: usize,
    /// Pixels per stack are drawn from 1..=max_pixels.
    pub max_pixels: usize,
    /// Methods per stack are drawn from 2..=max_methods.
    pub max_methods: usize,
    /// Noise σ per stack is drawn from (0, sigma_max].
    pub sigma_max: f64,
    pub seed: u64,
    pub tolerance: f64,
}

impl Default for DecomposeSettings {
    fn default() -> Self {
        Self {
            trials: 1000,
            max_pixels: 256,
            max_methods: 8,
            sigma_max: 0.5,
            seed: 0,
            tolerance: 1e-10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecomposeSummary {
    pub trials: usize,
    pub max_abs_identity_residual: f64,
    pub identity_holds: bool,
    /// Trials where the aggregate error exceeded the mean single error.
    pub inequality_violations: usize,
    /// Trials with at least two distinct maps.
    pub distinct_trials: usize,
    /// Distinct trials where the aggregate error was not strictly smaller.
    pub strictness_violations: usize,
    pub mean_single_mse: f64,
    pub mean_aggregate_mse: f64,
    pub mean_variance: f64,
}

impl DecomposeSummary {
    pub fn passed(&self) -> bool {
        self.identity_holds && self.inequality_violations == 0 && self.strictness_violations == 0
    }
}

/// Randomized stacks checked one at a time against the error decomposition.
pub fn decompose_trials(s: &DecomposeSettings) -> CliResult<DecomposeSummary> {
    if s.trials == 0 || s.max_pixels == 0 || s.max_methods < 2 || !(s.sigma_max > 0.0) {
        return Err(CliError::usage(
            "decompose needs trials ≥ 1, max_pixels ≥ 1, max_methods ≥ 2 and sigma_max > 0",
        ));
    }
    let mut out = DecomposeSummary {
        trials: s.trials,
        max_abs_identity_residual: 0.0,
        identity_holds: true,
        inequality_violations: 0,
        distinct_trials: 0,
        strictness_violations: 0,
        mean_single_mse: 0.0,
        mean_aggregate_mse: 0.0,
        mean_variance: 0.0,
    };
    for t in 0..s.trials {
        let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
        rng.set_stream(t as u64);
        let pixels = rng.random_range(1..=s.max_pixels);
        let methods = rng.random_range(2..=s.max_methods);
        let sigma = s.sigma_max * (1.0 - rng.random::<f64>());
        let case = SyntheticTruthCase::gaussian(pixels, methods, sigma, &mut rng)?;
        let r = decompose_mse(std::slice::from_ref(&case))?;
        out.max_abs_identity_residual = out.max_abs_identity_residual.max(r.identity_residual().abs());
        if r.aggregate_mse > r.mean_mse {
            out.inequality_violations += 1;
        }
        if case.observations.iter().any(|o| *o != case.observations[0]) {
            out.distinct_trials += 1;
            if r.aggregate_mse >= r.mean_mse {
                out.strictness_violations += 1;
            }
        }
        out.mean_single_mse += r.mean_mse;
        out.mean_aggregate_mse += r.aggregate_mse;
        out.mean_variance += r.variance;
    }
    let n = s.trials as f64;
    out.mean_single_mse /= n;
    out.mean_aggregate_mse /= n;
    out.mean_variance /= n;
    out.identity_holds = out.max_abs_identity_residual <= s.tolerance;
    Ok(out)
}
