use serde::{Deserialize, Serialize};

use super::graph::{Graph, Layer, Tape};
use super::kernels::{self, sigmoid};
use crate::error::{Error, Result};

/// Stabilizer for the LRP ε-rule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum LrpEpsilon {
    Absolute(f64),
    /// ε = factor × mean |pre-activation| of the layer, per sample.
    MeanAbsFactor(f64),
}

impl LrpEpsilon {
    pub(crate) fn value(&self, z: &[f64]) -> f64 {
        match *self {
            LrpEpsilon::Absolute(e) => e,
            LrpEpsilon::MeanAbsFactor(f) => f * z.iter().map(|v| v.abs()).sum::<f64>() / z.len() as f64,
        }
    }
}

#[inline]
pub(crate) fn stab_sign(z: f64) -> f64 {
    if z >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// How a backward signal crosses each layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Rule {
    /// Plain reverse-mode gradient.
    Gradient,
    /// Gradient with negative upstream signal zeroed at every activation.
    Guided,
    /// ε-rule relevance redistribution; activations pass relevance through.
    Lrp(LrpEpsilon),
}

/// Backward signals at every layer boundary: `deltas[l]` is the signal
/// w.r.t. the input of layer `l`; `deltas[L]` is the seed on the output head.
#[derive(Clone, Debug)]
pub struct Backprop {
    pub deltas: Vec<Vec<f64>>,
}

impl Backprop {
    pub fn input(&self) -> &[f64] {
        &self.deltas[0]
    }
}

pub fn backward(graph: &Graph, tape: &Tape, seed: Vec<f64>, rule: Rule) -> Result<Backprop> {
    let layers = graph.layers();
    if seed.len() != tape.logits().len() {
        return Err(Error::ShapeMismatch {
            expected: tape.logits().len().to_string(),
            actual: seed.len().to_string(),
        });
    }
    let mut deltas = vec![Vec::new(); layers.len() + 1];
    deltas[layers.len()] = seed;
    for l in (0..layers.len()).rev() {
        deltas[l] = step(graph, l, tape, &deltas[l + 1], rule)?;
    }
    Ok(Backprop { deltas })
}

pub(crate) fn step(graph: &Graph, l: usize, tape: &Tape, upstream: &[f64], rule: Rule) -> Result<Vec<f64>> {
    let layer = &graph.layers()[l];
    let in_shape = graph.shapes()[l];
    let out_len = graph.shapes()[l + 1].len();
    let input = &tape.acts[l];
    let n = tape.n;
    let out = match (layer, rule) {
        (Layer::Conv2d(c), Rule::Gradient | Rule::Guided) => {
            let mut din = vec![0.0; n * in_shape.len()];
            for (up, d) in upstream.chunks(out_len).zip(din.chunks_mut(in_shape.len())) {
                kernels::conv_backward_input(up, in_shape, &c.weight, c.out_channels, c.kernel, d);
            }
            din
        }
        (Layer::Conv2d(c), Rule::Lrp(eps)) => {
            let mut din = vec![0.0; n * in_shape.len()];
            for i in 0..n {
                let z = &tape.acts[l + 1][i * out_len..(i + 1) * out_len];
                let ratio = lrp_ratio(&upstream[i * out_len..(i + 1) * out_len], z, eps.value(z));
                let d = &mut din[i * in_shape.len()..(i + 1) * in_shape.len()];
                kernels::conv_backward_input(&ratio, in_shape, &c.weight, c.out_channels, c.kernel, d);
                for (r, a) in d.iter_mut().zip(&input[i * in_shape.len()..]) {
                    *r *= a;
                }
            }
            din
        }
        (Layer::Dense(d), Rule::Gradient | Rule::Guided) => {
            kernels::dense_backward_input(upstream, n, &d.weight, d.inputs, d.outputs)
        }
        (Layer::Dense(d), Rule::Lrp(eps)) => {
            let mut ratio = Vec::with_capacity(upstream.len());
            for i in 0..n {
                let z = &tape.acts[l + 1][i * d.outputs..(i + 1) * d.outputs];
                ratio.extend(lrp_ratio(&upstream[i * d.outputs..(i + 1) * d.outputs], z, eps.value(z)));
            }
            let mut din = kernels::dense_backward_input(&ratio, n, &d.weight, d.inputs, d.outputs);
            for (r, a) in din.iter_mut().zip(input) {
                *r *= a;
            }
            din
        }
        (Layer::MaxPool2d { .. }, _) => {
            let mut din = vec![0.0; n * in_shape.len()];
            for (g, &idx) in upstream.iter().zip(&tape.pool_routes[l]) {
                din[idx] += g;
            }
            din
        }
        (Layer::Relu, Rule::Gradient) => {
            upstream.iter().zip(input).map(|(g, z)| if *z > 0.0 { *g } else { 0.0 }).collect()
        }
        (Layer::Relu, Rule::Guided) => {
            upstream.iter().zip(input).map(|(g, z)| if *z > 0.0 { g.max(0.0) } else { 0.0 }).collect()
        }
        (Layer::SoftPlus { beta }, Rule::Gradient) => {
            upstream.iter().zip(input).map(|(g, z)| g * sigmoid(beta * z)).collect()
        }
        (Layer::SoftPlus { beta }, Rule::Guided) => {
            upstream.iter().zip(input).map(|(g, z)| g.max(0.0) * sigmoid(beta * z)).collect()
        }
        (Layer::Relu | Layer::SoftPlus { .. }, Rule::Lrp(_)) => upstream.to_vec(),
        (Layer::Dropout { .. }, _) => match &tape.dropout_masks[l] {
            Some(mask) => upstream.iter().zip(mask).map(|(g, m)| g * m).collect(),
            None => upstream.to_vec(),
        },
        (Layer::Flatten, _) => upstream.to_vec(),
    };
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            layer: format!("#{l} {}", layer.name()),
            pass: "backward",
        });
    }
    Ok(out)
}

/// `R_j / (z_j + ε·sign(z_j))`, zero where the stabilized denominator vanishes.
pub(crate) fn lrp_ratio(relevance: &[f64], z: &[f64], eps: f64) -> Vec<f64> {
    relevance
        .iter()
        .zip(z)
        .map(|(r, z)| {
            let zs = z + eps * stab_sign(*z);
            if zs == 0.0 {
                0.0
            } else {
                r / zs
            }
        })
        .collect()
}

/// Gradients of `Σ seed · logits` w.r.t. every parameter blob, in the order
/// of [`Graph::params`].
pub fn param_gradients(graph: &Graph, tape: &Tape, seed: Vec<f64>) -> Result<Vec<Vec<f64>>> {
    let layers = graph.layers();
    let mut grads: Vec<Vec<f64>> = Vec::new();
    let mut upstream = seed;
    for l in (0..layers.len()).rev() {
        let in_shape = graph.shapes()[l];
        let out_len = graph.shapes()[l + 1].len();
        match &layers[l] {
            Layer::Conv2d(c) => {
                let mut dw = vec![0.0; c.weight.len()];
                let mut db = vec![0.0; c.bias.len()];
                for (x, up) in tape.acts[l].chunks(in_shape.len()).zip(upstream.chunks(out_len)) {
                    kernels::conv_backward_params(x, in_shape, up, c.out_channels, c.kernel, &mut dw, &mut db);
                }
                grads.push(db);
                grads.push(dw);
            }
            Layer::Dense(d) => {
                let mut dw = vec![0.0; d.weight.len()];
                let mut db = vec![0.0; d.bias.len()];
                kernels::dense_backward_params(&tape.acts[l], &upstream, tape.n, d.inputs, d.outputs, &mut dw, &mut db);
                grads.push(db);
                grads.push(dw);
            }
            _ => {}
        }
        if l > 0 {
            upstream = step(graph, l, tape, &upstream, Rule::Gradient)?;
        }
    }
    grads.reverse();
    Ok(grads)
}
