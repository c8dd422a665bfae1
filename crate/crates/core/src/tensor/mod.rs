//! Minimal dense-tensor engine: a fixed layer vocabulary with forward
//! evaluation, reverse-mode gradients under several propagation rules, and
//! the reverse-over-reverse machinery explanation attacks need.

mod backward;
mod graph;
pub(crate) mod kernels;
mod second_order;

pub use backward::{backward, param_gradients, Backprop, LrpEpsilon, Rule};
pub(crate) use graph::argmax;
pub use graph::{Conv2d, Dense, Graph, Layer, Nonlinearity, Prediction, Tape};
pub use kernels::softmax;
pub use second_order::{
    grad_input, grad_of_scalar_of_grad, reverse_sweep, rule_adjoint, seed_adjoint, seed_for, Adjoints, SeedKind,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub const fn vector(len: usize) -> Self {
        Self::new(len, 1, 1)
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn pixels(&self) -> usize {
        self.height * self.width
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {})", self.channels, self.height, self.width)
    }
}

/// A single C×H×W image, row-major, optionally carrying the inclusive value
/// range its pixels must stay in.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    shape: Shape,
    data: Vec<f64>,
    range: Option<(f64, f64)>,
}

impl ImageTensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values for shape {shape}", shape.len()),
                actual: data.len().to_string(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite pixel at index {i}")));
        }
        Ok(Self {
            shape,
            data,
            range: None,
        })
    }

    pub fn with_range(shape: Shape, data: Vec<f64>, lo: f64, hi: f64) -> Result<Self> {
        if !(lo <= hi) {
            return Err(Error::invalid(format!("empty value range [{lo}, {hi}]")));
        }
        let mut t = Self::new(shape, data)?;
        if let Some(i) = t.data.iter().position(|v| *v < lo || *v > hi) {
            return Err(Error::invalid(format!(
                "pixel {i} = {} outside declared range [{lo}, {hi}]",
                t.data[i]
            )));
        }
        t.range = Some((lo, hi));
        Ok(t)
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
            range: None,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn range(&self) -> Option<(f64, f64)> {
        self.range
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Same shape and range, new values. Values outside the range are clamped.
    pub fn with_data(&self, mut data: Vec<f64>) -> Result<Self> {
        if data.len() != self.data.len() {
            return Err(Error::ShapeMismatch {
                expected: self.data.len().to_string(),
                actual: data.len().to_string(),
            });
        }
        if let Some((lo, hi)) = self.range {
            for v in &mut data {
                *v = v.clamp(lo, hi);
            }
        }
        let mut t = Self::new(self.shape, data)?;
        t.range = self.range;
        Ok(t)
    }
}
