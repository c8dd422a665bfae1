//! Derivatives of functions of backward signals.
//!
//! An explanation is a function of the input-level backward signal, which
//! depends on the input through the recorded activations. Its gradient is
//! taken in two sweeps:
//!
//! 1. [`rule_adjoint`] walks the backward pass in reverse (input side
//!    first), producing the adjoint of each layer's backward signal and
//!    accumulating into [`Adjoints`] the direct dependence of each backward
//!    step on the forward activations.
//! 2. [`reverse_sweep`] pushes those activation adjoints down to the input
//!    with an ordinary gradient pass.
//!
//! Max-pool routing is frozen at the recording point. ReLU has no usable
//! second derivative, so the gradient and guided rules require SoftPlus.

use super::backward::{self, lrp_ratio, stab_sign, Backprop, LrpEpsilon, Rule};
use super::graph::{Graph, Layer, Tape};
use super::kernels::{self, sigmoid};
use super::ImageTensor;
use crate::error::{Error, Result};

/// Which scalar of the output head seeds the backward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeedKind {
    /// Pre-softmax logit of the class.
    Logit,
    /// Softmax probability of the class.
    Probability,
    /// Relevance initialised to the class logit (LRP).
    LrpLogit,
}

pub fn seed_for(tape: &Tape, classes: &[usize], kind: SeedKind) -> Vec<f64> {
    let k = tape.logits().len() / tape.n;
    let mut seed = vec![0.0; tape.logits().len()];
    for (i, &c) in classes.iter().enumerate() {
        let logits = tape.sample_logits(i);
        let s = &mut seed[i * k..(i + 1) * k];
        match kind {
            SeedKind::Logit => s[c] = 1.0,
            SeedKind::LrpLogit => s[c] = logits[c],
            SeedKind::Probability => {
                let p = kernels::softmax(logits);
                for (m, v) in s.iter_mut().enumerate() {
                    *v = p[c] * (if m == c { 1.0 } else { 0.0 } - p[m]);
                }
            }
        }
    }
    seed
}

/// Adds the contribution of the seed's own dependence on the logits.
pub fn seed_adjoint(tape: &Tape, classes: &[usize], kind: SeedKind, seed_bar: &[f64], logits_bar: &mut [f64]) {
    let k = tape.logits().len() / tape.n;
    for (i, &c) in classes.iter().enumerate() {
        let sb = &seed_bar[i * k..(i + 1) * k];
        let lb = &mut logits_bar[i * k..(i + 1) * k];
        match kind {
            SeedKind::Logit => {}
            SeedKind::LrpLogit => lb[c] += sb[c],
            SeedKind::Probability => {
                let p = kernels::softmax(tape.sample_logits(i));
                let b: f64 = sb.iter().zip(&p).map(|(s, q)| s * q).sum();
                let a = sb[c] - b;
                for m in 0..k {
                    let dpc = p[c] * (if m == c { 1.0 } else { 0.0 } - p[m]);
                    lb[m] += dpc * a - p[c] * (sb[m] * p[m] - p[m] * b);
                }
            }
        }
    }
}

/// Per-activation adjoint accumulators, indexed like [`Tape::acts`].
#[derive(Clone, Debug)]
pub struct Adjoints(pub Vec<Vec<f64>>);

impl Adjoints {
    pub fn zeros(tape: &Tape) -> Self {
        Adjoints(tape.acts.iter().map(|a| vec![0.0; a.len()]).collect())
    }

    pub fn add(&mut self, index: usize, values: &[f64]) {
        for (a, v) in self.0[index].iter_mut().zip(values) {
            *a += v;
        }
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        self.0.last_mut().expect("non-empty")
    }
}

/// Reverse-mode pass through `rule`'s backward computation. `input_bar` is
/// the adjoint of `bp.input()`. Returns the adjoint of the seed.
pub fn rule_adjoint(
    graph: &Graph,
    tape: &Tape,
    bp: &Backprop,
    rule: Rule,
    input_bar: Vec<f64>,
    acc: &mut Adjoints,
) -> Result<Vec<f64>> {
    let n = tape.n;
    let mut dbar = input_bar;
    for (l, layer) in graph.layers().iter().enumerate() {
        let in_shape = graph.shapes()[l];
        let out_len = graph.shapes()[l + 1].len();
        let a = &tape.acts[l];
        let up = &bp.deltas[l + 1];
        let next = match (layer, rule) {
            (Layer::Conv2d(c), Rule::Gradient | Rule::Guided) => {
                let mut next = vec![0.0; n * out_len];
                for (src, dst) in dbar.chunks(in_shape.len()).zip(next.chunks_mut(out_len)) {
                    kernels::conv_forward(src, in_shape, &c.weight, None, c.out_channels, c.kernel, dst);
                }
                next
            }
            (Layer::Dense(d), Rule::Gradient | Rule::Guided) => {
                kernels::dense_forward(&dbar, n, &d.weight, None, d.inputs, d.outputs)
            }
            (Layer::Conv2d(c), Rule::Lrp(eps)) => {
                let mut next = vec![0.0; n * out_len];
                for i in 0..n {
                    let (ins, outs) = (i * in_shape.len()..(i + 1) * in_shape.len(), i * out_len..(i + 1) * out_len);
                    let z = &tape.acts[l + 1][outs.clone()];
                    let e = eps.value(z);
                    let ratio = lrp_ratio(&up[outs.clone()], z, e);
                    let mut u = vec![0.0; in_shape.len()];
                    kernels::conv_backward_input(&ratio, in_shape, &c.weight, c.out_channels, c.kernel, &mut u);
                    let db = &dbar[ins.clone()];
                    let a_i = &a[ins.clone()];
                    let abar: Vec<f64> = db.iter().zip(&u).map(|(d, u)| d * u).collect();
                    acc.0[l][ins].iter_mut().zip(&abar).for_each(|(t, v)| *t += v);
                    let ubar: Vec<f64> = db.iter().zip(a_i).map(|(d, a)| d * a).collect();
                    let mut cbar = vec![0.0; out_len];
                    kernels::conv_forward(&ubar, in_shape, &c.weight, None, c.out_channels, c.kernel, &mut cbar);
                    let zbar = lrp_denominator_adjoint(&cbar, &ratio, z, e, eps, &mut next[outs.clone()]);
                    acc.0[l + 1][outs].iter_mut().zip(&zbar).for_each(|(t, v)| *t += v);
                }
                next
            }
            (Layer::Dense(d), Rule::Lrp(eps)) => {
                let mut next = vec![0.0; n * out_len];
                for i in 0..n {
                    let (ins, outs) = (i * d.inputs..(i + 1) * d.inputs, i * d.outputs..(i + 1) * d.outputs);
                    let z = &tape.acts[l + 1][outs.clone()];
                    let e = eps.value(z);
                    let ratio = lrp_ratio(&up[outs.clone()], z, e);
                    let u = kernels::dense_backward_input(&ratio, 1, &d.weight, d.inputs, d.outputs);
                    let db = &dbar[ins.clone()];
                    let abar: Vec<f64> = db.iter().zip(&u).map(|(d, u)| d * u).collect();
                    let ubar: Vec<f64> = db.iter().zip(&a[ins.clone()]).map(|(d, a)| d * a).collect();
                    acc.0[l][ins].iter_mut().zip(&abar).for_each(|(t, v)| *t += v);
                    let cbar = kernels::dense_forward(&ubar, 1, &d.weight, None, d.inputs, d.outputs);
                    let zbar = lrp_denominator_adjoint(&cbar, &ratio, z, e, eps, &mut next[outs.clone()]);
                    acc.0[l + 1][outs].iter_mut().zip(&zbar).for_each(|(t, v)| *t += v);
                }
                next
            }
            (Layer::MaxPool2d { .. }, _) => tape.pool_routes[l].iter().map(|&idx| dbar[idx]).collect(),
            (Layer::Relu, Rule::Gradient | Rule::Guided) => {
                return Err(Error::ContractViolation(format!(
                    "layer #{l} is ReLU; second-order derivatives need SoftPlus substitution"
                )));
            }
            (Layer::SoftPlus { beta }, Rule::Gradient | Rule::Guided) => {
                let guided = rule == Rule::Guided;
                let mut next = Vec::with_capacity(dbar.len());
                let mut abar = Vec::with_capacity(dbar.len());
                for ((d, g), z) in dbar.iter().zip(up).zip(a) {
                    let s = sigmoid(beta * z);
                    let ds = beta * s * (1.0 - s);
                    let (h, dh) = if guided {
                        if *g > 0.0 {
                            (*g, 1.0)
                        } else {
                            (0.0, 0.0)
                        }
                    } else {
                        (*g, 1.0)
                    };
                    next.push(s * d * dh);
                    abar.push(d * h * ds);
                }
                acc.add(l, &abar);
                next
            }
            (Layer::Relu | Layer::SoftPlus { .. }, Rule::Lrp(_)) => dbar,
            (Layer::Dropout { .. }, _) => match &tape.dropout_masks[l] {
                Some(mask) => dbar.iter().zip(mask).map(|(g, m)| g * m).collect(),
                None => dbar,
            },
            (Layer::Flatten, _) => dbar,
        };
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                layer: format!("#{l} {}", layer.name()),
                pass: "adjoint",
            });
        }
        dbar = next;
    }
    Ok(dbar)
}

/// Adjoint of `ratio = R / (z + ε(z)·sign z)` w.r.t. `R` (written into
/// `rbar`) and `z` (returned).
fn lrp_denominator_adjoint(cbar: &[f64], ratio: &[f64], z: &[f64], eps: f64, rule: LrpEpsilon, rbar: &mut [f64]) -> Vec<f64> {
    let mut zbar = vec![0.0; z.len()];
    let mut eps_bar = 0.0;
    for j in 0..z.len() {
        let zs = z[j] + eps * stab_sign(z[j]);
        if zs == 0.0 {
            continue;
        }
        rbar[j] += cbar[j] / zs;
        let zsbar = -cbar[j] * ratio[j] / zs;
        zbar[j] += zsbar;
        eps_bar += zsbar * stab_sign(z[j]);
    }
    if let LrpEpsilon::MeanAbsFactor(f) = rule {
        let scale = eps_bar * f / z.len() as f64;
        for (zb, zv) in zbar.iter_mut().zip(z) {
            let d_abs = if *zv > 0.0 {
                1.0
            } else if *zv < 0.0 {
                -1.0
            } else {
                0.0
            };
            *zb += scale * d_abs;
        }
    }
    zbar
}

/// Pushes accumulated activation adjoints down to the input.
pub fn reverse_sweep(graph: &Graph, tape: &Tape, acc: Adjoints) -> Result<Vec<f64>> {
    let mut acc = acc.0;
    let mut carry = acc.pop().expect("non-empty");
    for l in (0..graph.layers().len()).rev() {
        carry = backward::step(graph, l, tape, &carry, Rule::Gradient)?;
        for (c, a) in carry.iter_mut().zip(&acc[l]) {
            *c += a;
        }
    }
    Ok(carry)
}

/// Gradient of the selected output scalar w.r.t. every input element.
pub fn grad_input(graph: &Graph, x: &ImageTensor, class: usize, use_logit: bool) -> Result<ImageTensor> {
    check_class(graph, class)?;
    let tape = graph.record(x)?;
    let kind = if use_logit { SeedKind::Logit } else { SeedKind::Probability };
    let bp = backward::backward(graph, &tape, seed_for(&tape, &[class], kind), Rule::Gradient)?;
    ImageTensor::new(x.shape(), bp.deltas.into_iter().next().expect("non-empty"))
}

pub(crate) fn check_class(graph: &Graph, class: usize) -> Result<()> {
    if class >= graph.num_classes() {
        return Err(Error::invalid(format!("class index {class} ≥ {} classes", graph.num_classes())));
    }
    Ok(())
}

/// `d scalar_fn(∇ₓ y) / dx` for a SoftPlus graph. `scalar_fn` maps the input
/// gradient to its value and its gradient w.r.t. that input gradient.
pub fn grad_of_scalar_of_grad<F>(
    graph: &Graph,
    x: &ImageTensor,
    class: usize,
    use_logit: bool,
    scalar_fn: F,
) -> Result<(f64, ImageTensor)>
where
    F: FnOnce(&[f64]) -> (f64, Vec<f64>),
{
    if graph.has_relu() {
        return Err(Error::ContractViolation(
            "graph contains ReLU; substitute SoftPlus before taking second derivatives".into(),
        ));
    }
    check_class(graph, class)?;
    let tape = graph.record(x)?;
    let kind = if use_logit { SeedKind::Logit } else { SeedKind::Probability };
    let bp = backward::backward(graph, &tape, seed_for(&tape, &[class], kind), Rule::Gradient)?;
    let (value, grad_bar) = scalar_fn(bp.input());
    if grad_bar.len() != bp.input().len() {
        return Err(Error::ShapeMismatch {
            expected: bp.input().len().to_string(),
            actual: grad_bar.len().to_string(),
        });
    }
    let mut acc = Adjoints::zeros(&tape);
    let seed_bar = rule_adjoint(graph, &tape, &bp, Rule::Gradient, grad_bar, &mut acc)?;
    seed_adjoint(&tape, &[class], kind, &seed_bar, acc.logits_mut());
    let dx = reverse_sweep(graph, &tape, acc)?;
    Ok((value, ImageTensor::new(x.shape(), dx)?))
}
