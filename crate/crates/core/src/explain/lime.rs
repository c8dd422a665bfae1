use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_class, heatmap_for};
use crate::error::{Error, Result};
use crate::heatmap::{Heatmap, Provenance};
use crate::segment::SegmentMap;
use crate::tensor::{softmax, Graph, ImageTensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LimeConfig {
    pub samples: usize,
    pub kernel_width: f64,
    pub ridge: f64,
    /// Value written into switched-off segments.
    pub baseline: f64,
}

impl Default for LimeConfig {
    fn default() -> Self {
        Self {
            samples: 1000,
            kernel_width: 0.25,
            ridge: 1e-3,
            baseline: 0.0,
        }
    }
}

pub fn lime(
    graph: &Graph,
    x: &ImageTensor,
    class: usize,
    segments: &SegmentMap,
    cfg: &LimeConfig,
    seed: u64,
) -> Result<Heatmap> {
    lime_with(graph, x, class, segments, cfg, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Weighted ridge regression of the class probability on binary segment
/// masks. The first sample keeps every segment; the rest switch each segment
/// on with probability ½. Sample weights are exp(−d²/w²) for the cosine
/// distance d to the all-on mask. Each coefficient is painted over its segment.
pub(crate) fn lime_with(
    graph: &Graph,
    x: &ImageTensor,
    class: usize,
    segments: &SegmentMap,
    cfg: &LimeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Heatmap> {
    check_class(graph, class)?;
    let shape = x.shape();
    if segments.height() != shape.height || segments.width() != shape.width {
        return Err(Error::ShapeMismatch {
            expected: format!("{}×{} segment map", shape.height, shape.width),
            actual: format!("{}×{}", segments.height(), segments.width()),
        });
    }
    let s = segments.count();
    if cfg.samples < s {
        return Err(Error::invalid(format!("LIME needs samples ≥ segments ({} < {s})", cfg.samples)));
    }
    if !(cfg.kernel_width > 0.0) || !(cfg.ridge >= 0.0) {
        return Err(Error::invalid("LIME needs kernel width > 0 and ridge ≥ 0"));
    }
    let masks: Vec<Vec<bool>> = (0..cfg.samples)
        .map(|i| (0..s).map(|_| i == 0 || rng.random_bool(0.5)).collect())
        .collect();

    let plane = shape.pixels();
    let len = shape.len();
    let mut targets = Vec::with_capacity(cfg.samples);
    for chunk in masks.chunks(100) {
        let mut xs = Vec::with_capacity(chunk.len() * len);
        for m in chunk {
            xs.extend(
                x.data()
                    .iter()
                    .enumerate()
                    .map(|(i, v)| if m[segments.label(i % plane)] { *v } else { cfg.baseline }),
            );
        }
        let logits = graph.logits_batch(&xs, chunk.len())?;
        targets.extend(logits.chunks(graph.num_classes()).map(|row| softmax(row)[class]));
    }

    let weights: Vec<f64> = masks
        .iter()
        .map(|m| {
            let on = m.iter().filter(|b| **b).count() as f64;
            let d = if on == 0.0 { 1.0 } else { 1.0 - on / (on.sqrt() * (s as f64).sqrt()) };
            (-(d * d) / (cfg.kernel_width * cfg.kernel_width)).exp()
        })
        .collect();
    let (coef, ridge, warning) = weighted_ridge(&masks, &targets, &weights, cfg.ridge)?;

    let values = (0..plane).map(|p| coef[segments.label(p)]).collect();
    let mut p = Provenance::new("lime")
        .with_param("samples", cfg.samples)
        .with_param("kernel_width", cfg.kernel_width)
        .with_param("ridge", ridge)
        .with_param("segments", s);
    p.class = Some(class);
    if let Some(w) = warning {
        p.warn(w);
    }
    heatmap_for(x, values, p)
}

/// Solves (XᵀWX + λ·D) β = XᵀWy with an unpenalized intercept; returns the
/// slope coefficients. λ grows tenfold until the system is positive definite.
pub(crate) fn weighted_ridge(
    masks: &[Vec<bool>],
    y: &[f64],
    w: &[f64],
    ridge: f64,
) -> Result<(Vec<f64>, f64, Option<String>)> {
    let s = masks[0].len();
    let d = s + 1;
    let mut a = DMatrix::<f64>::zeros(d, d);
    let mut b = DVector::<f64>::zeros(d);
    let mut row = vec![0.0; d];
    for ((m, &yi), &wi) in masks.iter().zip(y).zip(w) {
        row[0] = 1.0;
        for (r, on) in row[1..].iter_mut().zip(m) {
            *r = if *on { 1.0 } else { 0.0 };
        }
        for i in 0..d {
            if row[i] == 0.0 {
                continue;
            }
            b[i] += wi * row[i] * yi;
            for j in 0..d {
                a[(i, j)] += wi * row[i] * row[j];
            }
        }
    }
    let mut lambda = ridge;
    let mut warning = None;
    for _ in 0..12 {
        let mut reg = a.clone();
        for i in 1..d {
            reg[(i, i)] += lambda;
        }
        if let Some(chol) = reg.cholesky() {
            let beta = chol.solve(&b);
            if beta.iter().all(|v| v.is_finite()) {
                return Ok((beta.iter().skip(1).copied().collect(), lambda, warning));
            }
        }
        lambda = if lambda > 0.0 { lambda * 10.0 } else { 1e-6 };
        warning = Some(format!("regression singular; ridge raised to {lambda}"));
    }
    Err(Error::UndefinedMetric("LIME regression remained singular".into()))
}
