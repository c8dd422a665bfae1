//! Faithfulness scores, non-informative baselines and heatmap similarity.

pub mod report;

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use report::{read_csv, write_csv, AttackRow, IrofRow, PairwiseRow, SensnRow};

use crate::error::{Error, Result};
use crate::heatmap::{Heatmap, Provenance};
use crate::segment::SegmentMap;
use crate::tensor::{softmax, Graph, ImageTensor};

/// Probability ratios p̂_t for t = 0..=T after removing the top-t segments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationCurve {
    pub ratios: Vec<f64>,
    /// Segment labels in removal order.
    pub order: Vec<usize>,
    /// Per-channel replacement value.
    pub baseline: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IrofResult {
    /// Area over the curve on a 0–100 scale.
    pub score: f64,
    pub curve: DegradationCurve,
}

/// Segments ordered by mean relevance, highest first; ties go to the lower label.
pub fn segment_ranking(e: &Heatmap, segments: &SegmentMap) -> Result<Vec<usize>> {
    if e.dims() != (segments.height(), segments.width()) {
        return Err(Error::ShapeMismatch {
            expected: format!("{}×{}", segments.height(), segments.width()),
            actual: format!("{}×{}", e.height(), e.width()),
        });
    }
    let mut sums = vec![0.0; segments.count()];
    for (p, v) in e.values().iter().enumerate() {
        sums[segments.label(p)] += v;
    }
    let means: Vec<f64> = sums.iter().zip(segments.sizes()).map(|(s, n)| s / n as f64).collect();
    let mut order: Vec<usize> = (0..means.len()).collect();
    order.sort_by(|&a, &b| means[b].total_cmp(&means[a]).then(a.cmp(&b)));
    Ok(order)
}

/// 100/(T+1) · Σ_t (1 − p̂_t).
pub fn area_over_curve(ratios: &[f64]) -> f64 {
    100.0 * ratios.iter().map(|r| 1.0 - r).sum::<f64>() / ratios.len() as f64
}

/// Iterative removal of the most relevant segments. `steps` defaults to
/// every segment; `fill` holds one replacement value per channel.
pub fn irof(
    graph: &Graph,
    x: &ImageTensor,
    class: usize,
    e: &Heatmap,
    segments: &SegmentMap,
    fill: &[f64],
    steps: Option<usize>,
) -> Result<IrofResult> {
    let shape = x.shape();
    if fill.len() != shape.channels {
        return Err(Error::invalid(format!("{} fill values for {} channels", fill.len(), shape.channels)));
    }
    if class >= graph.num_classes() {
        return Err(Error::invalid(format!("class {class} ≥ {} model outputs", graph.num_classes())));
    }
    let order = segment_ranking(e, segments)?;
    let t_max = steps.unwrap_or(order.len());
    if t_max > order.len() {
        return Err(Error::invalid(format!("{t_max} IROF steps exceed {} segments", order.len())));
    }
    let plane = shape.pixels();
    let mut batch = Vec::with_capacity((t_max + 1) * shape.len());
    let mut cur = x.data().to_vec();
    batch.extend_from_slice(&cur);
    for &seg in &order[..t_max] {
        for p in 0..plane {
            if segments.label(p) == seg {
                for (c, v) in fill.iter().enumerate() {
                    cur[c * plane + p] = *v;
                }
            }
        }
        batch.extend_from_slice(&cur);
    }
    let logits = graph.logits_batch(&batch, t_max + 1)?;
    let probs: Vec<f64> = logits.chunks(graph.num_classes()).map(|row| softmax(row)[class]).collect();
    if !(probs[0] > 0.0) {
        return Err(Error::UndefinedMetric(format!("original probability of class {class} is zero")));
    }
    let ratios: Vec<f64> = probs.iter().map(|p| (p / probs[0]).clamp(0.0, 1.0)).collect();
    Ok(IrofResult {
        score: area_over_curve(&ratios),
        curve: DegradationCurve {
            ratios,
            order: order[..t_max].to_vec(),
            baseline: fill.to_vec(),
        },
    })
}

/// Pearson correlation; undefined when either side has zero variance (up to
/// rounding relative to its largest magnitude).
pub fn pcc(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} values", a.len()),
            actual: format!("{} values", b.len()),
        });
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    let flat = |v: &[f64], var: f64| (var / n).sqrt() <= 1e-12 * v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if flat(a, va) || flat(b, vb) {
        return Err(Error::UndefinedMetric("correlation with a zero-variance input".into()));
    }
    Ok((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

/// `count` integers spaced evenly in log between `lo` and `hi`, rounded and
/// deduplicated.
pub fn log_grid(lo: usize, hi: usize, count: usize) -> Result<Vec<usize>> {
    if lo == 0 || hi < lo || count == 0 {
        return Err(Error::invalid(format!("log grid needs 1 ≤ lo ≤ hi and count ≥ 1 (got {lo}, {hi}, {count})")));
    }
    if count == 1 {
        return Ok(vec![lo]);
    }
    let (a, b) = ((lo as f64).ln(), (hi as f64).ln());
    let mut grid: Vec<usize> = (0..count)
        .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp().round() as usize)
        .collect();
    grid.dedup();
    Ok(grid)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensitivityConfig {
    pub grid: Vec<usize>,
    pub subsets: usize,
    pub seed: u64,
    /// Measure the output drop on the logit (otherwise the softmax probability).
    pub use_logit: bool,
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        Self {
            grid: log_grid(10, 780, 15).expect("static grid"),
            subsets: 100,
            seed: 0,
            use_logit: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityPoint {
    pub n: usize,
    /// Mean PCC over images where it is defined; `None` if none were.
    pub mean_pcc: Option<f64>,
    pub images: usize,
    pub excluded: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityNResult {
    pub points: Vec<SensitivityPoint>,
    pub subsets: usize,
    pub seed: u64,
}

/// One image's PCC per grid point (`None` where undefined). Removed pixels
/// are set to zero in every channel.
pub fn sensitivity_n_image(
    graph: &Graph,
    x: &ImageTensor,
    class: usize,
    e: &Heatmap,
    cfg: &SensitivityConfig,
    rng: &mut impl Rng,
) -> Result<Vec<Option<f64>>> {
    let shape = x.shape();
    let plane = shape.pixels();
    if e.dims() != (shape.height, shape.width) {
        return Err(Error::ShapeMismatch {
            expected: format!("{}×{}", shape.height, shape.width),
            actual: format!("{}×{}", e.height(), e.width()),
        });
    }
    if cfg.subsets < 2 {
        return Err(Error::invalid("sensitivity-n needs at least 2 subsets per n"));
    }
    let output = |logits: &[f64]| if cfg.use_logit { logits[class] } else { softmax(logits)[class] };
    let base = output(&graph.logits(x)?);
    let mut out = Vec::with_capacity(cfg.grid.len());
    for &n in &cfg.grid {
        if n == 0 || n > plane {
            return Err(Error::invalid(format!("subset size {n} outside 1..={plane}")));
        }
        let mut batch = Vec::with_capacity(cfg.subsets * shape.len());
        let mut relevance = Vec::with_capacity(cfg.subsets);
        for _ in 0..cfg.subsets {
            let idx = sample(rng, plane, n);
            let mut xs = x.data().to_vec();
            let mut r = 0.0;
            for p in idx.iter() {
                r += e.values()[p];
                for c in 0..shape.channels {
                    xs[c * plane + p] = 0.0;
                }
            }
            relevance.push(r);
            batch.extend(xs);
        }
        let logits = graph.logits_batch(&batch, cfg.subsets)?;
        let drops: Vec<f64> = logits.chunks(graph.num_classes()).map(|l| base - output(l)).collect();
        out.push(pcc(&drops, &relevance).ok());
    }
    Ok(out)
}

/// Mean PCC per subset size over `(image, class, heatmap)` triples. Image `i`
/// draws its subsets from stream `i` of the configured seed.
pub fn sensitivity_n(graph: &Graph, items: &[(ImageTensor, usize, Heatmap)], cfg: &SensitivityConfig) -> Result<SensitivityNResult> {
    let per_image = items
        .iter()
        .enumerate()
        .map(|(i, (x, class, e))| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            sensitivity_n_image(graph, x, *class, e, cfg, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize_sensitivity(cfg, &per_image))
}

/// Averages per-image PCC rows (as from [`sensitivity_n_image`]) in index order.
pub fn summarize_sensitivity(cfg: &SensitivityConfig, per_image: &[Vec<Option<f64>>]) -> SensitivityNResult {
    let points = cfg
        .grid
        .iter()
        .enumerate()
        .map(|(k, &n)| {
            let defined: Vec<f64> = per_image.iter().filter_map(|row| row[k]).collect();
            SensitivityPoint {
                n,
                mean_pcc: (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
                images: defined.len(),
                excluded: per_image.len() - defined.len(),
            }
        })
        .collect();
    SensitivityNResult {
        points,
        subsets: cfg.subsets,
        seed: cfg.seed,
    }
}

/// Sobel gradient magnitude with replicated borders, normalized to unit sum.
pub fn sobel_baseline(x: &ImageTensor) -> Result<Heatmap> {
    let shape = x.shape();
    if shape.channels != 1 {
        return Err(Error::invalid(format!("sobel baseline expects one channel, got {}", shape.channels)));
    }
    let (h, w) = (shape.height as isize, shape.width as isize);
    let at = |r: isize, c: isize| x.data()[(r.clamp(0, h - 1) * w + c.clamp(0, w - 1)) as usize];
    let mut values = Vec::with_capacity(shape.pixels());
    for r in 0..h {
        for c in 0..w {
            let gx = (at(r - 1, c + 1) + 2.0 * at(r, c + 1) + at(r + 1, c + 1))
                - (at(r - 1, c - 1) + 2.0 * at(r, c - 1) + at(r + 1, c - 1));
            let gy = (at(r + 1, c - 1) + 2.0 * at(r + 1, c) + at(r + 1, c + 1))
                - (at(r - 1, c - 1) + 2.0 * at(r - 1, c) + at(r - 1, c + 1));
            values.push(gx.hypot(gy));
        }
    }
    let raw = Heatmap::new(shape.height, shape.width, values, Provenance::new("sobel"))?;
    Ok(raw.normalized(true))
}

/// I.i.d. uniform values normalized to unit sum.
pub fn random_baseline(height: usize, width: usize, seed: u64) -> Heatmap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..height * width).map(|_| rng.random::<f64>()).collect();
    let p = Provenance::new("random").with_param("seed", seed);
    Heatmap::new(height, width, values, p).expect("finite uniform draws").normalized(true)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    Mse,
    Pcc,
    /// Fraction of pixels in each top set.
    TopK(f64),
}

impl Similarity {
    pub const TOPK_DEFAULT: f64 = 0.1;

    pub fn standard() -> [Similarity; 3] {
        [Similarity::Mse, Similarity::Pcc, Similarity::TopK(Self::TOPK_DEFAULT)]
    }

    pub fn id(&self) -> &'static str {
        match self {
            Similarity::Mse => "mse",
            Similarity::Pcc => "pcc",
            Similarity::TopK(_) => "topk",
        }
    }
}

impl fmt::Display for Similarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Similarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mse" => Ok(Similarity::Mse),
            "pcc" => Ok(Similarity::Pcc),
            "topk" => Ok(Similarity::TopK(Self::TOPK_DEFAULT)),
            _ => Err(Error::invalid(format!("unknown similarity {s:?} (expected mse, pcc or topk)"))),
        }
    }
}

/// Indices of the k largest values, ties to the lower index.
pub fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn similarity(a: &Heatmap, b: &Heatmap, metric: Similarity) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch {
            expected: format!("{}×{}", a.height(), a.width()),
            actual: format!("{}×{}", b.height(), b.width()),
        });
    }
    match metric {
        Similarity::Mse => {
            let (na, nb) = (a.normalized(false), b.normalized(false));
            Ok(na.values().iter().zip(nb.values()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64)
        }
        Similarity::Pcc => pcc(a.values(), b.values()),
        Similarity::TopK(fraction) => {
            if !(fraction > 0.0 && fraction <= 1.0) {
                return Err(Error::invalid(format!("top-k fraction {fraction} outside (0, 1]")));
            }
            let k = (fraction * a.len() as f64).ceil() as usize;
            let mut in_a = vec![false; a.len()];
            for i in top_k(a.values(), k) {
                in_a[i] = true;
            }
            let shared = top_k(b.values(), k).into_iter().filter(|&i| in_a[i]).count();
            Ok(shared as f64 / k as f64)
        }
    }
}

/// m(target, adversarial) − m(target, original).
pub fn metric_diff(target: &Heatmap, adversarial: &Heatmap, original: &Heatmap, metric: Similarity) -> Result<f64> {
    Ok(similarity(target, adversarial, metric)? - similarity(target, original, metric)?)
}

/// Cosine similarity between a heatmap and an annotation mask; 0 when either is all zeros.
pub fn cosine_alignment(e: &Heatmap, annotation: &[f64]) -> Result<f64> {
    if annotation.len() != e.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} annotation values", e.len()),
            actual: annotation.len().to_string(),
        });
    }
    if annotation.iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err(Error::invalid("annotation values must lie in [0, 1]"));
    }
    let dot: f64 = e.values().iter().zip(annotation).map(|(x, y)| x * y).sum();
    let ne = e.values().iter().map(|v| v * v).sum::<f64>().sqrt();
    let na = annotation.iter().map(|v| v * v).sum::<f64>().sqrt();
    if ne == 0.0 || na == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (ne * na)).clamp(-1.0, 1.0))
}
