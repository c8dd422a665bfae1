//! Pixelwise aggregation of normalized heatmaps and the bias–variance split
//! of their error against a known reference map.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::{Heatmap, Provenance};

const SUM_TOLERANCE: f64 = 1e-9;

/// J ≥ 2 same-shaped heatmaps, each summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapStack {
    maps: Vec<Heatmap>,
    methods: Vec<String>,
}

impl HeatmapStack {
    pub fn new(maps: Vec<Heatmap>, methods: Vec<String>) -> Result<Self> {
        if maps.len() < 2 {
            return Err(Error::invalid(format!("aggregation needs at least 2 heatmaps, got {}", maps.len())));
        }
        if methods.len() != maps.len() {
            return Err(Error::invalid(format!("{} method ids for {} heatmaps", methods.len(), maps.len())));
        }
        let dims = maps[0].dims();
        for (m, id) in maps.iter().zip(&methods) {
            if m.dims() != dims {
                return Err(Error::ShapeMismatch {
                    expected: format!("{}×{}", dims.0, dims.1),
                    actual: format!("{}×{} ({id})", m.height(), m.width()),
                });
            }
            if (m.sum() - 1.0).abs() > SUM_TOLERANCE {
                return Err(Error::invalid(format!("heatmap {id} sums to {} instead of 1", m.sum())));
            }
        }
        Ok(Self { maps, methods })
    }

    /// Normalizes raw maps first; method ids come from their provenance.
    pub fn normalize(maps: &[Heatmap], positive_only: bool) -> Result<Self> {
        let methods = maps.iter().map(|m| m.provenance.method.clone()).collect();
        Self::new(maps.iter().map(|m| m.normalized(positive_only)).collect(), methods)
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn maps(&self) -> &[Heatmap] {
        &self.maps
    }

    pub fn methods(&self) -> &[String] {
        &self.methods
    }

    pub fn dims(&self) -> (usize, usize) {
        self.maps[0].dims()
    }

    fn pixels(&self) -> usize {
        self.maps[0].len()
    }

    /// Pixelwise mean over methods.
    pub fn mean(&self) -> Vec<f64> {
        let j = self.len() as f64;
        (0..self.pixels()).map(|p| self.maps.iter().map(|m| m.values()[p]).sum::<f64>() / j).collect()
    }

    /// Pixelwise population standard deviation over methods.
    pub fn std(&self) -> Vec<f64> {
        let j = self.len() as f64;
        self.mean()
            .iter()
            .enumerate()
            .map(|(p, mu)| (self.maps.iter().map(|m| (m.values()[p] - mu).powi(2)).sum::<f64>() / j).sqrt())
            .collect()
    }

    /// Sub-stack of the given member indices.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        Self::new(
            idx.iter().map(|&i| self.maps[i].clone()).collect(),
            idx.iter().map(|&i| self.methods[i].clone()).collect(),
        )
    }

    fn provenance(&self, method: &str) -> Provenance {
        let first = &self.maps[0].provenance;
        let mut p = Provenance::new(method).with_param("methods", &self.methods);
        p.model = first.model.clone();
        p.image = first.image;
        p.class = first.class;
        p
    }
}

pub fn agg_mean(stack: &HeatmapStack) -> Heatmap {
    let (h, w) = stack.dims();
    Heatmap::new(h, w, stack.mean(), stack.provenance("agg-mean")).expect("mean of finite maps")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggVarConfig {
    pub epsilon: f64,
    /// Set when ε was derived as multiplier × dataset-mean σ.
    pub multiplier: Option<f64>,
}

impl AggVarConfig {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::invalid(format!("AGG-Var epsilon must be positive and finite, got {epsilon}")));
        }
        Ok(Self {
            epsilon,
            multiplier: None,
        })
    }
}

pub const DEFAULT_EPSILON_MULTIPLIER: f64 = 10.0;

/// ε = multiplier × mean of every σ value across the given maps.
pub fn epsilon_from_dataset(sigma_maps: &[Vec<f64>], multiplier: f64) -> Result<AggVarConfig> {
    if !(multiplier > 0.0 && multiplier.is_finite()) {
        return Err(Error::invalid(format!("epsilon multiplier must be positive, got {multiplier}")));
    }
    let count: usize = sigma_maps.iter().map(Vec::len).sum();
    if count == 0 {
        return Err(Error::invalid("epsilon_from_dataset needs at least one non-empty σ map"));
    }
    let mean = sigma_maps.iter().flatten().sum::<f64>() / count as f64;
    let mut cfg = AggVarConfig::new(multiplier * mean)
        .map_err(|_| Error::invalid(format!("dataset σ mean {mean} gives no usable epsilon")))?;
    cfg.multiplier = Some(multiplier);
    Ok(cfg)
}

/// Mean of E_j / (σ + ε) per pixel, rescaled to unit sum.
pub fn agg_var(stack: &HeatmapStack, cfg: &AggVarConfig) -> Result<Heatmap> {
    if !(cfg.epsilon > 0.0 && cfg.epsilon.is_finite()) {
        return Err(Error::invalid(format!("AGG-Var epsilon must be positive and finite, got {}", cfg.epsilon)));
    }
    let (h, w) = stack.dims();
    let values: Vec<f64> = stack.mean().iter().zip(stack.std()).map(|(mu, s)| mu / (s + cfg.epsilon)).collect();
    let p = stack.provenance("agg-var").with_param("epsilon", cfg.epsilon);
    let p = match cfg.multiplier {
        Some(m) => p.with_param("epsilon_multiplier", m),
        None => p,
    };
    let raw = Heatmap::new(h, w, values, p)?;
    let mut out = raw.normalized(false);
    out.provenance.params.remove("positive_only");
    Ok(out)
}

/// Member index pairs (a, b), a < b, in lexicographic order.
pub fn method_pairs(j: usize) -> Vec<(usize, usize)> {
    (0..j).flat_map(|a| (a + 1..j).map(move |b| (a, b))).collect()
}

/// Every two-method sub-stack, ordered as [`method_pairs`].
pub fn pairwise_stacks(stack: &HeatmapStack) -> Vec<HeatmapStack> {
    method_pairs(stack.len())
        .into_iter()
        .map(|(a, b)| stack.select(&[a, b]).expect("members of a valid stack"))
        .collect()
}

/// A reference map with several noisy estimates of it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTruthCase {
    pub truth: Vec<f64>,
    pub observations: Vec<Vec<f64>>,
    pub noise: String,
}

impl SyntheticTruthCase {
    /// Truth uniform on [0, 1) rescaled to unit sum; observations add i.i.d.
    /// N(0, σ²) per pixel.
    pub fn gaussian(pixels: usize, methods: usize, sigma: f64, rng: &mut impl Rng) -> Result<Self> {
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(format!("noise σ {sigma}: {e}")))?;
        let raw: Vec<f64> = (0..pixels).map(|_| rng.random::<f64>()).collect();
        let total: f64 = raw.iter().sum();
        let truth: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let observations = (0..methods)
            .map(|_| truth.iter().map(|t| t + normal.sample(rng)).collect())
            .collect();
        Ok(Self {
            truth,
            observations,
            noise: format!("gaussian(sigma={sigma})"),
        })
    }
}

/// `n` Gaussian cases from one seed.
pub fn synthetic_cases(n: usize, pixels: usize, methods: usize, sigma: f64, seed: u64) -> Result<Vec<SyntheticTruthCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| SyntheticTruthCase::gaussian(pixels, methods, sigma, &mut rng)).collect()
}

/// Errors averaged over pixels, then over cases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub per_method_mse: Vec<f64>,
    pub mean_mse: f64,
    pub aggregate_mse: f64,
    pub variance: f64,
}

impl DecompositionReport {
    /// mean MSE − (aggregate MSE + variance).
    pub fn identity_residual(&self) -> f64 {
        self.mean_mse - (self.aggregate_mse + self.variance)
    }
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

pub fn decompose_mse(cases: &[SyntheticTruthCase]) -> Result<DecompositionReport> {
    let first = cases.first().ok_or_else(|| Error::invalid("decomposition needs at least one case"))?;
    let j = first.observations.len();
    if j < 2 {
        return Err(Error::invalid(format!("decomposition needs at least 2 methods, got {j}")));
    }
    let mut per_method = vec![0.0; j];
    let (mut aggregate, mut variance) = (0.0, 0.0);
    for (c, case) in cases.iter().enumerate() {
        let n = case.truth.len();
        if n == 0 || case.observations.len() != j || case.observations.iter().any(|o| o.len() != n) {
            return Err(Error::ShapeMismatch {
                expected: format!("{j} observations of {n} pixels"),
                actual: format!("case {c}"),
            });
        }
        let mean: Vec<f64> = (0..n).map(|p| case.observations.iter().map(|o| o[p]).sum::<f64>() / j as f64).collect();
        for (acc, o) in per_method.iter_mut().zip(&case.observations) {
            *acc += mse(o, &case.truth);
        }
        aggregate += mse(&mean, &case.truth);
        variance += case.observations.iter().map(|o| mse(o, &mean)).sum::<f64>() / j as f64;
    }
    let k = cases.len() as f64;
    per_method.iter_mut().for_each(|v| *v /= k);
    Ok(DecompositionReport {
        mean_mse: per_method.iter().sum::<f64>() / j as f64,
        per_method_mse: per_method,
        aggregate_mse: aggregate / k,
        variance: variance / k,
    })
}
