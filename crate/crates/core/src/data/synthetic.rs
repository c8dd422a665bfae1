use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Shape;

/// Class-conditional images: class `c` lights up block `c` of a regular grid
/// of `block × block` squares separated by `gap` pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub block: usize,
    pub gap: usize,
    /// Background pixels are U[0, noise]; block pixels are 1 − U[0, noise].
    pub noise: f64,
    pub seed: u64,
    pub side: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            block: 5,
            gap: 1,
            noise: 0.2,
            seed: 0,
            side: 28,
        }
    }
}

impl SyntheticSpec {
    fn per_row(&self) -> usize {
        (self.side - self.gap) / (self.block + self.gap)
    }

    /// Top-left corner of each class block.
    pub fn block_origins(&self) -> Result<Vec<(usize, usize)>> {
        if self.classes == 0 || self.block == 0 {
            return Err(Error::invalid("synthetic spec needs ≥ 1 class and a non-empty block"));
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return Err(Error::invalid(format!("noise {} outside [0, 0.5]", self.noise)));
        }
        let per_row = self.per_row();
        if per_row == 0 || self.classes > per_row * per_row {
            return Err(Error::invalid(format!(
                "{} blocks of {}px with gap {} do not fit a {}×{} image",
                self.classes, self.block, self.gap, self.side, self.side
            )));
        }
        let stride = self.block + self.gap;
        Ok((0..self.classes)
            .map(|c| (self.gap + (c / per_row) * stride, self.gap + (c % per_row) * stride))
            .collect())
    }

    pub fn shape(&self) -> Shape {
        Shape::new(1, self.side, self.side)
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticSet {
    pub dataset: Dataset,
    /// One binary mask per class, 1 inside the class block.
    pub class_masks: Vec<Vec<f64>>,
}

impl SyntheticSet {
    /// Ground-truth relevance for sample `i`.
    pub fn mask(&self, i: usize) -> &[f64] {
        &self.class_masks[self.dataset.label(i)]
    }
}

/// Labels cycle through the classes in order; pixel noise comes from the seed.
pub fn make_synthetic(spec: &SyntheticSpec, n: usize) -> Result<SyntheticSet> {
    if n == 0 {
        return Err(Error::invalid("synthetic dataset needs n ≥ 1"));
    }
    let origins = spec.block_origins()?;
    let shape = spec.shape();
    let class_masks: Vec<Vec<f64>> = origins
        .iter()
        .map(|&(r0, c0)| {
            let mut m = vec![0.0; shape.len()];
            for r in r0..r0 + spec.block {
                for c in c0..c0 + spec.block {
                    m[r * spec.side + c] = 1.0;
                }
            }
            m
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut pixels = Vec::with_capacity(n * shape.len());
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % spec.classes;
        labels.push(class as u8);
        for &m in &class_masks[class] {
            let jitter = if spec.noise > 0.0 { rng.random_range(0.0..=spec.noise) } else { 0.0 };
            pixels.push(if m > 0.0 { 1.0 - jitter } else { jitter });
        }
    }
    Ok(SyntheticSet {
        dataset: Dataset::new(format!("synthetic-{}", spec.seed), shape, pixels, labels)?,
        class_masks,
    })
}
