use rand_chacha::ChaCha8Rng;

use super::{check_class, heatmap_for};
use crate::error::{Error, Result};
use crate::heatmap::{Heatmap, Provenance};
use crate::tensor::{backward, seed_for, Graph, ImageTensor, Layer, Rule, SeedKind};

/// Activation index right after the last convolution (and its nonlinearity,
/// if one follows directly).
pub fn default_gradcam_layer(graph: &Graph) -> Result<usize> {
    let layers = graph.layers();
    let conv = layers
        .iter()
        .rposition(|l| matches!(l, Layer::Conv2d(_)))
        .ok_or_else(|| Error::UnsupportedLayer {
            method: "grad-cam",
            layer: "model without convolutions".into(),
        })?;
    Ok(if layers.get(conv + 1).is_some_and(Layer::is_activation) {
        conv + 2
    } else {
        conv + 1
    })
}

/// ReLU(Σ_k α_k A_k) at activation `layer` (index into the recorded tape;
/// 0 is the input), α_k the spatial mean of ∂logit/∂A_k, bilinearly
/// upsampled to the input size.
pub fn grad_cam(graph: &Graph, x: &ImageTensor, class: usize, layer: Option<usize>) -> Result<Heatmap> {
    check_class(graph, class)?;
    let t = match layer {
        Some(t) => t,
        None => default_gradcam_layer(graph)?,
    };
    let shape = *graph
        .shapes()
        .get(t)
        .ok_or_else(|| Error::invalid(format!("activation index {t} beyond {} layers", graph.layers().len())))?;
    if t == graph.layers().len() || (shape.height == 1 && shape.width == 1) {
        return Err(Error::UnsupportedLayer {
            method: "grad-cam",
            layer: format!("activation {t} of shape {shape} is not a spatial feature map"),
        });
    }
    let tape = graph.record_batch(x.data(), 1, None::<&mut ChaCha8Rng>)?;
    let bp = backward(graph, &tape, seed_for(&tape, &[class], SeedKind::Logit), Rule::Gradient)?;
    let (acts, grads) = (&tape.acts[t], &bp.deltas[t]);
    let plane = shape.pixels();
    let mut cam = vec![0.0; plane];
    for (a, g) in acts.chunks(plane).zip(grads.chunks(plane)) {
        let alpha = g.iter().sum::<f64>() / plane as f64;
        for (c, v) in cam.iter_mut().zip(a) {
            *c += alpha * v;
        }
    }
    cam.iter_mut().for_each(|c| *c = c.max(0.0));
    let (h, w) = (x.shape().height, x.shape().width);
    let values = upsample_bilinear(&cam, shape.height, shape.width, h, w);
    let mut p = Provenance::new("gc").with_param("layer", t);
    p.class = Some(class);
    heatmap_for(x, values, p)
}

/// Bilinear resize with pixel-centre alignment and edge clamping.
pub fn upsample_bilinear(src: &[f64], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f64> {
    let coord = |d: usize, s: usize, dn: usize| -> (usize, usize, f64) {
        let pos = ((d as f64 + 0.5) * s as f64 / dn as f64 - 0.5).clamp(0.0, (s - 1) as f64);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(s - 1);
        (i0, i1, pos - i0 as f64)
    };
    let mut out = Vec::with_capacity(dh * dw);
    for r in 0..dh {
        let (r0, r1, fr) = coord(r, sh, dh);
        for c in 0..dw {
            let (c0, c1, fc) = coord(c, sw, dw);
            let top = src[r0 * sw + c0] * (1.0 - fc) + src[r0 * sw + c1] * fc;
            let bottom = src[r1 * sw + c0] * (1.0 - fc) + src[r1 * sw + c1] * fc;
            out.push(top * (1.0 - fr) + bottom * fr);
        }
    }
    out
}
