//! Attribution methods producing per-pixel relevance for one class decision.

mod gradcam;
mod lime;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use gradcam::{default_gradcam_layer, grad_cam, upsample_bilinear};
pub use lime::{lime, LimeConfig};

use crate::error::{Error, Result};
use crate::heatmap::{Heatmap, Provenance};
use crate::segment::{slic, SlicConfig};
use crate::tensor::{backward, seed_for, Graph, ImageTensor, Layer, LrpEpsilon, Rule, SeedKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Sm,
    Gb,
    Ig,
    Sg,
    Gc,
    Lrp,
    Lime,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Sm,
        Method::Gb,
        Method::Ig,
        Method::Sg,
        Method::Gc,
        Method::Lrp,
        Method::Lime,
    ];

    /// Members of the default aggregate.
    pub const AGGREGATE_DEFAULT: [Method; 5] = [Method::Sm, Method::Gb, Method::Ig, Method::Sg, Method::Gc];

    pub fn id(&self) -> &'static str {
        match self {
            Method::Sm => "sm",
            Method::Gb => "gb",
            Method::Ig => "ig",
            Method::Sg => "sg",
            Method::Gc => "gc",
            Method::Lrp => "lrp",
            Method::Lime => "lime",
        }
    }

    fn stream(&self) -> u64 {
        *self as u64 + 1
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.id().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown method {s:?} (expected one of sm, gb, ig, sg, gc, lrp, lime)")))
    }
}

/// Hyperparameters of every method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainConfig {
    pub ig_steps: usize,
    pub sg_samples: usize,
    /// Noise standard deviation as a fraction of the input value range.
    pub sg_sigma_fraction: f64,
    /// Activation index for Grad-CAM; `None` picks the last convolution's output.
    pub gc_layer: Option<usize>,
    pub lrp_epsilon: LrpEpsilon,
    pub lime: LimeConfig,
    pub slic: SlicConfig,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            ig_steps: 64,
            sg_samples: 25,
            sg_sigma_fraction: 0.15,
            gc_layer: None,
            lrp_epsilon: LrpEpsilon::MeanAbsFactor(0.01),
            lime: LimeConfig::default(),
            slic: SlicConfig::default(),
        }
    }
}

/// Independent RNG stream per (run seed, method, image).
pub fn method_rng(seed: u64, method: Method, image: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((method.stream() << 48) ^ image);
    rng
}

/// Runs `method` with its configured hyperparameters.
pub fn explain(
    graph: &Graph,
    x: &ImageTensor,
    class: usize,
    method: Method,
    cfg: &ExplainConfig,
    seed: u64,
    image: u64,
) -> Result<Heatmap> {
    let mut h = match method {
        Method::Sm => saliency(graph, x, class),
        Method::Gb => guided_backprop(graph, x, class),
        Method::Ig => {
            let lo = x.range().map_or(0.0, |r| r.0);
            integrated_gradients(graph, x, class, &ImageTensor::filled(x.shape(), lo), cfg.ig_steps)
        }
        Method::Sg => {
            let width = x.range().map_or(1.0, |(lo, hi)| hi - lo);
            let mut rng = method_rng(seed, method, image);
            smoothgrad_with(graph, x, class, cfg.sg_sigma_fraction * width, cfg.sg_samples, &mut rng)
        }
        Method::Gc => grad_cam(graph, x, class, cfg.gc_layer),
        Method::Lrp => lrp_epsilon(graph, x, class, cfg.lrp_epsilon),
        Method::Lime => {
            let segments = slic(x, &cfg.slic)?;
            let mut rng = method_rng(seed, method, image);
            lime::lime_with(graph, x, class, &segments, &cfg.lime, &mut rng)
        }
    }?;
    h.provenance.image = Some(image as usize);
    h.provenance.params.insert("seed".into(), seed.into());
    Ok(h)
}

pub(crate) fn check_class(graph: &Graph, class: usize) -> Result<()> {
    if class >= graph.num_classes() {
        return Err(Error::invalid(format!("class {class} ≥ {} model outputs", graph.num_classes())));
    }
    Ok(())
}

/// Backward signal at the input for the class logit under `rule`.
pub(crate) fn input_signal(graph: &Graph, x: &[f64], class: usize, rule: Rule) -> Result<Vec<f64>> {
    let tape = graph.record_batch(x, 1, None::<&mut ChaCha8Rng>)?;
    let kind = if matches!(rule, Rule::Lrp(_)) { SeedKind::LrpLogit } else { SeedKind::Logit };
    let bp = backward(graph, &tape, seed_for(&tape, &[class], kind), rule)?;
    Ok(bp.deltas.into_iter().next().expect("non-empty"))
}

/// Sums a C×H×W signal over channels, optionally taking magnitudes first.
pub(crate) fn channel_sum(x: &ImageTensor, signal: &[f64], magnitude: bool) -> Vec<f64> {
    let plane = x.shape().pixels();
    let mut out = vec![0.0; plane];
    for ch in signal.chunks(plane) {
        for (o, v) in out.iter_mut().zip(ch) {
            *o += if magnitude { v.abs() } else { *v };
        }
    }
    out
}

pub(crate) fn heatmap_for(x: &ImageTensor, values: Vec<f64>, provenance: Provenance) -> Result<Heatmap> {
    Heatmap::new(x.shape().height, x.shape().width, values, provenance)
}

/// Channel-summed |∂ logit_class / ∂x|.
pub fn saliency(graph: &Graph, x: &ImageTensor, class: usize) -> Result<Heatmap> {
    check_class(graph, class)?;
    let g = input_signal(graph, x.data(), class, Rule::Gradient)?;
    let mut p = Provenance::new("sm");
    p.class = Some(class);
    heatmap_for(x, channel_sum(x, &g, true), p)
}

/// Channel-summed magnitude of the guided backward signal. Models without
/// ReLU units get plain saliency and a provenance warning.
pub fn guided_backprop(graph: &Graph, x: &ImageTensor, class: usize) -> Result<Heatmap> {
    check_class(graph, class)?;
    if !graph.has_relu() {
        let mut h = saliency(graph, x, class)?;
        h.provenance.method = "gb".into();
        h.provenance.warn("model has no ReLU units; guided backpropagation reduces to saliency");
        return Ok(h);
    }
    let g = input_signal(graph, x.data(), class, Rule::Guided)?;
    let mut p = Provenance::new("gb");
    p.class = Some(class);
    heatmap_for(x, channel_sum(x, &g, true), p)
}

/// (x − baseline) ⊙ left-Riemann average of input gradients along the
/// straight path, at coefficients k/steps for k = 0..steps−1.
pub fn integrated_gradients(
    graph: &Graph,
    x: &ImageTensor,
    class: usize,
    baseline: &ImageTensor,
    steps: usize,
) -> Result<Heatmap> {
    check_class(graph, class)?;
    if steps == 0 {
        return Err(Error::invalid("integrated gradients needs steps ≥ 1"));
    }
    if baseline.shape() != x.shape() {
        return Err(Error::ShapeMismatch {
            expected: x.shape().to_string(),
            actual: baseline.shape().to_string(),
        });
    }
    let diff: Vec<f64> = x.data().iter().zip(baseline.data()).map(|(a, b)| a - b).collect();
    let mut avg = vec![0.0; diff.len()];
    for k in 0..steps {
        let alpha = k as f64 / steps as f64;
        let point: Vec<f64> = baseline.data().iter().zip(&diff).map(|(b, d)| b + alpha * d).collect();
        let g = input_signal(graph, &point, class, Rule::Gradient)?;
        for (a, v) in avg.iter_mut().zip(&g) {
            *a += v;
        }
    }
    let attr: Vec<f64> = avg.iter().zip(&diff).map(|(a, d)| a / steps as f64 * d).collect();
    let mut p = Provenance::new("ig").with_param("steps", steps);
    p.class = Some(class);
    heatmap_for(x, channel_sum(x, &attr, false), p)
}

pub fn smoothgrad(graph: &Graph, x: &ImageTensor, class: usize, sigma: f64, samples: usize, seed: u64) -> Result<Heatmap> {
    smoothgrad_with(graph, x, class, sigma, samples, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Mean saliency over Gaussian-perturbed copies of `x` (perturbations are not
/// clipped to the value range).
pub fn smoothgrad_with(
    graph: &Graph,
    x: &ImageTensor,
    class: usize,
    sigma: f64,
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Heatmap> {
    check_class(graph, class)?;
    if samples == 0 || !(sigma >= 0.0) {
        return Err(Error::invalid("smoothgrad needs samples ≥ 1 and σ ≥ 0"));
    }
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut mean = vec![0.0; x.shape().pixels()];
    for k in 1..=samples {
        let noisy: Vec<f64> = x.data().iter().map(|v| v + sigma * normal.sample(rng)).collect();
        let g = input_signal(graph, &noisy, class, Rule::Gradient)?;
        for (m, v) in mean.iter_mut().zip(channel_sum(x, &g, true)) {
            *m += (v - *m) / k as f64;
        }
    }
    let mut p = Provenance::new("sg").with_param("samples", samples).with_param("sigma", sigma);
    p.class = Some(class);
    heatmap_for(x, mean, p)
}

/// ε-rule relevance at the input, starting from the class logit.
pub fn lrp_epsilon(graph: &Graph, x: &ImageTensor, class: usize, eps: LrpEpsilon) -> Result<Heatmap> {
    check_class(graph, class)?;
    if let Some(l) = graph.layers().iter().find(|l| matches!(l, Layer::SoftPlus { .. })) {
        return Err(Error::UnsupportedLayer {
            method: "lrp",
            layer: l.name(),
        });
    }
    let r = input_signal(graph, x.data(), class, Rule::Lrp(eps))?;
    let mut p = Provenance::new("lrp").with_param("epsilon", eps);
    p.class = Some(class);
    heatmap_for(x, channel_sum(x, &r, false), p)
}
