//! Architectures, initialization, training and persistence.

mod checkpoint;
mod train;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, TrainingMetadata, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{evaluate_loss, train, train_with, Adadelta, EpochRecord, TrainConfig};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::{Conv2d, Dense, Graph, ImageTensor, Layer, Shape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d { filters: usize, kernel: usize },
    MaxPool2d { size: usize },
    Dense { units: usize },
    Relu,
    SoftPlus { beta: f64 },
    Dropout { rate: f64 },
    Flatten,
}

/// Declarative layer list; [`Architecture::compile`] turns it into a [`Graph`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub name: String,
    pub input: Shape,
    pub layers: Vec<LayerSpec>,
}

pub fn build_reference_cnn() -> Architecture {
    use LayerSpec::*;
    Architecture {
        name: "reference-cnn".into(),
        input: Shape::new(1, 28, 28),
        layers: vec![
            Conv2d { filters: 32, kernel: 3 },
            Relu,
            Conv2d { filters: 64, kernel: 3 },
            Relu,
            MaxPool2d { size: 2 },
            Dropout { rate: 0.25 },
            Flatten,
            Dense { units: 128 },
            Relu,
            Dropout { rate: 0.5 },
            Dense { units: 10 },
        ],
    }
}

/// Small conv net for fast tests and toy experiments.
pub fn build_small_cnn(input: Shape, classes: usize) -> Architecture {
    use LayerSpec::*;
    Architecture {
        name: "small-cnn".into(),
        input,
        layers: vec![
            Conv2d { filters: 4, kernel: 3 },
            Relu,
            MaxPool2d { size: 2 },
            Flatten,
            Dense { units: 16 },
            Relu,
            Dense { units: classes },
        ],
    }
}

/// Flatten followed by a single dense layer.
pub fn build_linear(input: Shape, classes: usize) -> Architecture {
    Architecture {
        name: "linear".into(),
        input,
        layers: vec![LayerSpec::Flatten, LayerSpec::Dense { units: classes }],
    }
}

impl Architecture {
    /// Glorot-uniform weights drawn in layer order from `seed`; zero biases.
    pub fn compile(&self, seed: u64) -> Result<Graph> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.build(|fan_in, fan_out, len, bias_len| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = (0..len).map(|_| rng.random_range(-limit..limit)).collect();
            (w, vec![0.0; bias_len])
        })
    }

    /// Compiles with the given parameter blobs (weight then bias per layer).
    pub fn with_params(&self, blobs: Vec<Vec<f64>>) -> Result<Graph> {
        let expected = self.param_blob_lengths()?;
        if blobs.len() != expected.len() || blobs.iter().zip(&expected).any(|(b, e)| b.len() != *e) {
            return Err(Error::ShapeMismatch {
                expected: format!("blobs of lengths {expected:?}"),
                actual: format!("{:?}", blobs.iter().map(Vec::len).collect::<Vec<_>>()),
            });
        }
        let mut blobs = blobs.into_iter();
        self.build(|_, _, _, _| {
            let w = blobs.next().expect("length checked");
            (w, blobs.next().expect("length checked"))
        })
    }

    pub fn param_blob_lengths(&self) -> Result<Vec<usize>> {
        let g = self.build(|_, _, len, bias_len| (vec![0.0; len], vec![0.0; bias_len]))?;
        Ok(g.params().iter().map(|p| p.len()).collect())
    }

    /// `init(fan_in, fan_out, weight_len, bias_len)` supplies each parametric layer.
    fn build(&self, mut init: impl FnMut(usize, usize, usize, usize) -> (Vec<f64>, Vec<f64>)) -> Result<Graph> {
        let mut shape = self.input;
        let mut layers = Vec::with_capacity(self.layers.len());
        for spec in &self.layers {
            let layer = match *spec {
                LayerSpec::Conv2d { filters, kernel } => {
                    let (fan_in, fan_out) = (shape.channels * kernel * kernel, filters * kernel * kernel);
                    let (weight, bias) = init(fan_in, fan_out, filters * fan_in, filters);
                    Layer::Conv2d(Conv2d {
                        in_channels: shape.channels,
                        out_channels: filters,
                        kernel,
                        weight: Arc::new(weight),
                        bias: Arc::new(bias),
                    })
                }
                LayerSpec::Dense { units } => {
                    let inputs = shape.len();
                    let (weight, bias) = init(inputs, units, inputs * units, units);
                    Layer::Dense(Dense {
                        inputs,
                        outputs: units,
                        weight: Arc::new(weight),
                        bias: Arc::new(bias),
                    })
                }
                LayerSpec::MaxPool2d { size } => Layer::MaxPool2d { size },
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::SoftPlus { beta } => Layer::SoftPlus { beta },
                LayerSpec::Dropout { rate } => Layer::Dropout { rate },
                LayerSpec::Flatten => Layer::Flatten,
            };
            shape = layer.output_shape(shape)?;
            layers.push(layer);
        }
        Graph::new(self.input, layers)
    }
}

/// Predicted class (ties to the lowest index) and softmax probabilities.
pub fn predict(graph: &Graph, x: &ImageTensor) -> Result<(usize, Vec<f64>)> {
    let p = graph.forward(x)?;
    Ok((p.class(), p.probabilities))
}

/// Predicted classes for every image in the dataset, evaluated in chunks.
pub fn predict_dataset(graph: &Graph, data: &Dataset) -> Result<Vec<usize>> {
    let len = data.shape().len();
    let k = graph.num_classes();
    let mut out = Vec::with_capacity(data.len());
    let chunk = 256;
    let mut start = 0;
    while start < data.len() {
        let end = (start + chunk).min(data.len());
        let mut xs = Vec::with_capacity((end - start) * len);
        for i in start..end {
            xs.extend_from_slice(data.pixels(i));
        }
        let logits = graph.logits_batch(&xs, end - start)?;
        out.extend(logits.chunks(k).map(crate::tensor::argmax));
        start = end;
    }
    Ok(out)
}

pub fn accuracy(graph: &Graph, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("accuracy of an empty dataset"));
    }
    let pred = predict_dataset(graph, data)?;
    let hits = pred.iter().zip(data.labels()).filter(|(p, l)| **p == **l as usize).count();
    Ok(hits as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_cnn_parameter_count() {
        let g = build_reference_cnn().compile(0).unwrap();
        let expected = 32 * (9 + 1) + 64 * (32 * 9 + 1) + 128 * (64 * 12 * 12 + 1) + 10 * (128 + 1);
        assert_eq!(expected, 1_199_882);
        assert_eq!(g.param_count(), expected);
        assert_eq!(g.num_classes(), 10);
    }

    #[test]
    fn batch_output_shape() {
        let g = build_reference_cnn().compile(3).unwrap();
        let xs = vec![0.5; 7 * 784];
        assert_eq!(g.logits_batch(&xs, 7).unwrap().len(), 7 * 10);
    }

    #[test]
    fn glorot_bounds_and_zero_bias() {
        let g = build_reference_cnn().compile(1).unwrap();
        let p = g.params();
        let limit = (6.0f64 / (9.0 + 32.0 * 9.0)).sqrt();
        assert!(p[0].iter().all(|w| w.abs() < limit));
        assert!(p[1].iter().all(|b| *b == 0.0));
        let dense_limit = (6.0f64 / (9216.0 + 128.0)).sqrt();
        assert!(p[4].iter().all(|w| w.abs() < dense_limit));
        let max = p[4].iter().fold(0.0f64, |m, w| m.max(w.abs()));
        assert!(max > 0.99 * dense_limit);
    }

    #[test]
    fn with_params_round_trips() {
        let arch = build_small_cnn(Shape::new(1, 8, 8), 3);
        let g = arch.compile(5).unwrap();
        let blobs: Vec<Vec<f64>> = g.params().iter().map(|p| p.to_vec()).collect();
        let h = arch.with_params(blobs).unwrap();
        let x = ImageTensor::filled(Shape::new(1, 8, 8), 0.3);
        assert_eq!(g.logits(&x).unwrap(), h.logits(&x).unwrap());
        assert!(arch.with_params(vec![vec![0.0; 3]]).is_err());
    }

    #[test]
    fn uniform_logits_predict_class_zero() {
        let arch = build_linear(Shape::new(1, 2, 2), 4);
        let g = arch.with_params(vec![vec![0.0; 16], vec![0.0; 4]]).unwrap();
        let (class, probs) = predict(&g, &ImageTensor::filled(Shape::new(1, 2, 2), 0.7)).unwrap();
        assert_eq!(class, 0);
        assert!(probs.iter().all(|p| (p - 0.25).abs() < 1e-15));
    }
}
