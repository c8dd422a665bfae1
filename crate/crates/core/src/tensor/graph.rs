use std::sync::Arc;

use rand::Rng;

use super::kernels::{self, softplus};
use super::{ImageTensor, Shape};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// (out, in, k, k) row-major.
    pub weight: Arc<Vec<f64>>,
    pub bias: Arc<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// (outputs, inputs) row-major.
    pub weight: Arc<Vec<f64>>,
    pub bias: Arc<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub enum Layer {
    Conv2d(Conv2d),
    MaxPool2d { size: usize },
    Dense(Dense),
    Relu,
    SoftPlus { beta: f64 },
    /// Identity at inference; inverted dropout when recording a training tape.
    Dropout { rate: f64 },
    Flatten,
}

impl Layer {
    pub fn name(&self) -> String {
        match self {
            Layer::Conv2d(c) => format!("conv2d({}→{}, {}x{})", c.in_channels, c.out_channels, c.kernel, c.kernel),
            Layer::MaxPool2d { size } => format!("maxpool2d({size})"),
            Layer::Dense(d) => format!("dense({}→{})", d.inputs, d.outputs),
            Layer::Relu => "relu".into(),
            Layer::SoftPlus { beta } => format!("softplus(β={beta})"),
            Layer::Dropout { rate } => format!("dropout({rate})"),
            Layer::Flatten => "flatten".into(),
        }
    }

    pub fn is_activation(&self) -> bool {
        matches!(self, Layer::Relu | Layer::SoftPlus { .. })
    }

    pub(crate) fn output_shape(&self, input: Shape) -> Result<Shape> {
        let mismatch = |expected: String| Error::ShapeMismatch {
            expected,
            actual: format!("{input} into {}", self.name()),
        };
        match self {
            Layer::Conv2d(c) => {
                if input.channels != c.in_channels || input.height < c.kernel || input.width < c.kernel {
                    return Err(mismatch(format!("{} channels, spatial ≥ {}", c.in_channels, c.kernel)));
                }
                if c.weight.len() != c.out_channels * c.in_channels * c.kernel * c.kernel
                    || c.bias.len() != c.out_channels
                {
                    return Err(mismatch("parameter blobs matching conv dimensions".into()));
                }
                Ok(Shape::new(c.out_channels, input.height + 1 - c.kernel, input.width + 1 - c.kernel))
            }
            Layer::MaxPool2d { size } => {
                if *size == 0 || input.height < *size || input.width < *size {
                    return Err(mismatch(format!("spatial ≥ {size}")));
                }
                Ok(Shape::new(input.channels, input.height / size, input.width / size))
            }
            Layer::Dense(d) => {
                if input.len() != d.inputs || input.height != 1 || input.width != 1 {
                    return Err(mismatch(format!("flat vector of {}", d.inputs)));
                }
                if d.weight.len() != d.inputs * d.outputs || d.bias.len() != d.outputs {
                    return Err(mismatch("parameter blobs matching dense dimensions".into()));
                }
                Ok(Shape::vector(d.outputs))
            }
            Layer::Flatten => Ok(Shape::vector(input.len())),
            Layer::Dropout { rate } if !(0.0..1.0).contains(rate) => {
                Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")))
            }
            Layer::SoftPlus { beta } if !(*beta > 0.0) => Err(Error::invalid(format!("softplus β = {beta} must be > 0"))),
            Layer::Relu | Layer::SoftPlus { .. } | Layer::Dropout { .. } => Ok(input),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Nonlinearity {
    Relu,
    SoftPlus { beta: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
}

impl Prediction {
    /// Argmax of the probabilities, ties broken by lowest class index.
    pub fn class(&self) -> usize {
        argmax(&self.probabilities)
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Activations recorded by one forward pass over a batch of `n` samples.
/// `acts[l]` is the input of layer `l`; the last entry holds the logits.
#[derive(Clone, Debug)]
pub struct Tape {
    pub n: usize,
    pub acts: Vec<Vec<f64>>,
    pub(crate) pool_routes: Vec<Vec<usize>>,
    pub(crate) dropout_masks: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn logits(&self) -> &[f64] {
        self.acts.last().expect("tape holds at least the input")
    }

    pub fn sample_logits(&self, i: usize) -> &[f64] {
        let logits = self.logits();
        let k = logits.len() / self.n;
        &logits[i * k..(i + 1) * k]
    }
}

/// An immutable feed-forward network over a closed layer vocabulary.
/// Parameter blobs are reference counted; clones share them.
#[derive(Clone, Debug)]
pub struct Graph {
    input_shape: Shape,
    layers: Vec<Layer>,
    shapes: Vec<Shape>,
}

impl Graph {
    pub fn new(input_shape: Shape, layers: Vec<Layer>) -> Result<Self> {
        let mut shapes = vec![input_shape];
        for layer in &layers {
            let next = layer.output_shape(*shapes.last().expect("non-empty"))?;
            shapes.push(next);
        }
        let out = *shapes.last().expect("non-empty");
        if out.height != 1 || out.width != 1 || out.channels == 0 {
            return Err(Error::ShapeMismatch {
                expected: "a single flat output head".into(),
                actual: out.to_string(),
            });
        }
        Ok(Self {
            input_shape,
            layers,
            shapes,
        })
    }

    pub fn input_shape(&self) -> Shape {
        self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// `shapes()[l]` is the shape entering layer `l`; the last is the output.
    pub fn shapes(&self) -> &[Shape] {
        &self.shapes
    }

    pub fn num_classes(&self) -> usize {
        self.shapes.last().expect("non-empty").len()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Conv2d(c) => c.weight.len() + c.bias.len(),
                Layer::Dense(d) => d.weight.len() + d.bias.len(),
                _ => 0,
            })
            .sum()
    }

    pub fn has_relu(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, Layer::Relu))
    }

    /// Parameter blobs in layer order (weight then bias), shared, not copied.
    pub fn params(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv2d(c) => {
                    out.push(c.weight.as_slice());
                    out.push(c.bias.as_slice());
                }
                Layer::Dense(d) => {
                    out.push(d.weight.as_slice());
                    out.push(d.bias.as_slice());
                }
                _ => {}
            }
        }
        out
    }

    /// Mutable access for optimizers. Blobs shared with other graphs are
    /// copied first.
    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv2d(c) => {
                    out.push(Arc::make_mut(&mut c.weight));
                    out.push(Arc::make_mut(&mut c.bias));
                }
                Layer::Dense(d) => {
                    out.push(Arc::make_mut(&mut d.weight));
                    out.push(Arc::make_mut(&mut d.bias));
                }
                _ => {}
            }
        }
        out
    }

    /// Swaps every ReLU/SoftPlus for `mode`; parameters are shared unchanged.
    pub fn substitute_nonlinearity(&self, mode: Nonlinearity) -> Graph {
        let layers = self
            .layers
            .iter()
            .map(|l| match (l, mode) {
                (Layer::Relu | Layer::SoftPlus { .. }, Nonlinearity::Relu) => Layer::Relu,
                (Layer::Relu | Layer::SoftPlus { .. }, Nonlinearity::SoftPlus { beta }) => Layer::SoftPlus { beta },
                (other, _) => other.clone(),
            })
            .collect();
        Graph {
            input_shape: self.input_shape,
            layers,
            shapes: self.shapes.clone(),
        }
    }

    fn check_input(&self, x: &ImageTensor) -> Result<()> {
        if x.shape() != self.input_shape {
            return Err(Error::ShapeMismatch {
                expected: self.input_shape.to_string(),
                actual: x.shape().to_string(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &ImageTensor) -> Result<Prediction> {
        self.check_input(x)?;
        let logits = self.logits_batch(x.data(), 1)?;
        let probabilities = kernels::softmax(&logits);
        Ok(Prediction { logits, probabilities })
    }

    pub fn logits(&self, x: &ImageTensor) -> Result<Vec<f64>> {
        self.check_input(x)?;
        self.logits_batch(x.data(), 1)
    }

    /// Inference over `n` concatenated samples; returns n × classes logits.
    pub fn logits_batch(&self, xs: &[f64], n: usize) -> Result<Vec<f64>> {
        let mut cur = xs.to_vec();
        self.check_batch(&cur, n)?;
        for (l, layer) in self.layers.iter().enumerate() {
            cur = self.layer_forward(l, layer, &cur, n, None)?.0;
        }
        Ok(cur)
    }

    /// Forward pass keeping every intermediate activation.
    pub fn record(&self, x: &ImageTensor) -> Result<Tape> {
        self.check_input(x)?;
        self.record_batch(x.data(), 1, None::<&mut rand_chacha::ChaCha8Rng>)
    }

    /// Batched recording; with an RNG, dropout layers sample masks (training mode).
    pub fn record_batch<R: Rng>(&self, xs: &[f64], n: usize, mut rng: Option<&mut R>) -> Result<Tape> {
        self.check_batch(xs, n)?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut pool_routes = Vec::with_capacity(self.layers.len());
        let mut dropout_masks = Vec::with_capacity(self.layers.len());
        acts.push(xs.to_vec());
        for (l, layer) in self.layers.iter().enumerate() {
            let mask = match (layer, rng.as_deref_mut()) {
                (Layer::Dropout { rate }, Some(rng)) if *rate > 0.0 => {
                    let keep = 1.0 / (1.0 - rate);
                    let len = acts[l].len();
                    Some((0..len).map(|_| if rng.random::<f64>() < *rate { 0.0 } else { keep }).collect::<Vec<_>>())
                }
                _ => None,
            };
            let (out, route) = self.layer_forward(l, layer, &acts[l], n, mask.as_deref())?;
            acts.push(out);
            pool_routes.push(route);
            dropout_masks.push(mask);
        }
        Ok(Tape {
            n,
            acts,
            pool_routes,
            dropout_masks,
        })
    }

    fn check_batch(&self, xs: &[f64], n: usize) -> Result<()> {
        if n == 0 || xs.len() != n * self.input_shape.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{n} × {}", self.input_shape),
                actual: format!("{} values", xs.len()),
            });
        }
        Ok(())
    }

    fn layer_forward(
        &self,
        l: usize,
        layer: &Layer,
        input: &[f64],
        n: usize,
        dropout_mask: Option<&[f64]>,
    ) -> Result<(Vec<f64>, Vec<usize>)> {
        let in_shape = self.shapes[l];
        let out_shape = self.shapes[l + 1];
        let mut route = Vec::new();
        let out = match layer {
            Layer::Conv2d(c) => {
                let mut out = vec![0.0; n * out_shape.len()];
                for (src, dst) in input.chunks(in_shape.len()).zip(out.chunks_mut(out_shape.len())) {
                    kernels::conv_forward(src, in_shape, &c.weight, Some(&c.bias), c.out_channels, c.kernel, dst);
                }
                out
            }
            Layer::Dense(d) => kernels::dense_forward(input, n, &d.weight, Some(&d.bias), d.inputs, d.outputs),
            Layer::MaxPool2d { size } => {
                let mut out = Vec::with_capacity(n * out_shape.len());
                for (i, src) in input.chunks(in_shape.len()).enumerate() {
                    let (o, r) = kernels::maxpool_forward(src, in_shape, *size);
                    out.extend(o);
                    route.extend(r.into_iter().map(|idx| idx + i * in_shape.len()));
                }
                out
            }
            Layer::Relu => input.iter().map(|z| z.max(0.0)).collect(),
            Layer::SoftPlus { beta } => input.iter().map(|z| softplus(*z, *beta)).collect(),
            Layer::Dropout { .. } => match dropout_mask {
                Some(mask) => input.iter().zip(mask).map(|(a, m)| a * m).collect(),
                None => input.to_vec(),
            },
            Layer::Flatten => input.to_vec(),
        };
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                layer: format!("#{l} {}", layer.name()),
                pass: "forward",
            });
        }
        Ok((out, route))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn dense(inputs: usize, outputs: usize, weight: Vec<f64>, bias: Vec<f64>) -> Layer {
        Layer::Dense(Dense {
            inputs,
            outputs,
            weight: Arc::new(weight),
            bias: Arc::new(bias),
        })
    }

    #[test]
    fn zero_network_gives_uniform_softmax() {
        let g = Graph::new(Shape::new(1, 2, 2), vec![Layer::Flatten, dense(4, 3, vec![0.0; 12], vec![0.0; 3])]).unwrap();
        let x = ImageTensor::new(Shape::new(1, 2, 2), vec![0.3, -1.0, 2.0, 5.0]).unwrap();
        let p = g.forward(&x).unwrap();
        assert_eq!(p.logits, vec![0.0; 3]);
        for q in &p.probabilities {
            assert!((q - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(p.class(), 0);
    }

    #[test]
    fn identity_dense_returns_flattened_input() {
        let mut w = vec![0.0; 16];
        for i in 0..4 {
            w[i * 4 + i] = 1.0;
        }
        let g = Graph::new(Shape::new(1, 2, 2), vec![Layer::Flatten, dense(4, 4, w, vec![0.0; 4])]).unwrap();
        let x = ImageTensor::new(Shape::new(1, 2, 2), vec![0.3, -1.0, 2.0, 5.0]).unwrap();
        assert_eq!(g.forward(&x).unwrap().logits, x.data());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let g = Graph::new(Shape::new(1, 2, 2), vec![Layer::Flatten, dense(4, 2, vec![0.0; 8], vec![0.0; 2])]).unwrap();
        let x = ImageTensor::filled(Shape::new(1, 3, 3), 0.0);
        assert!(matches!(g.forward(&x), Err(Error::ShapeMismatch { .. })));
        assert!(Graph::new(Shape::new(1, 2, 2), vec![dense(4, 2, vec![0.0; 8], vec![0.0; 2])]).is_err());
    }

    #[test]
    fn overflow_names_layer() {
        let g = Graph::new(Shape::new(1, 1, 2), vec![Layer::Flatten, dense(2, 1, vec![f64::MAX, f64::MAX], vec![0.0])]).unwrap();
        let x = ImageTensor::filled(Shape::new(1, 1, 2), 10.0);
        match g.forward(&x) {
            Err(Error::NonFinite { layer, .. }) => assert!(layer.contains("dense")),
            other => panic!("expected overflow error, got {other:?}"),
        }
    }

    #[test]
    fn substitution_shares_parameters() {
        let g = Graph::new(
            Shape::new(1, 1, 2),
            vec![Layer::Flatten, dense(2, 2, vec![1.0, -1.0, 0.5, 2.0], vec![0.1, 0.0]), Layer::Relu, dense(2, 1, vec![1.0, 1.0], vec![0.0])],
        )
        .unwrap();
        let s = g.substitute_nonlinearity(Nonlinearity::SoftPlus { beta: 3.0 });
        assert!(!s.has_relu());
        for (a, b) in g.params().iter().zip(s.params()) {
            assert_eq!(a.as_ptr(), b.as_ptr());
        }
        let back = s.substitute_nonlinearity(Nonlinearity::Relu);
        let x = ImageTensor::new(Shape::new(1, 1, 2), vec![0.7, -0.2]).unwrap();
        assert_eq!(g.logits(&x).unwrap(), back.logits(&x).unwrap());
    }
}
