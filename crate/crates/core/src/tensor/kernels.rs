//! Per-sample dense kernels. Convolutions are valid-padded, stride 1, and
//! lowered to GEMM through an im2col buffer laid out as (C·k·k) × (oh·ow).

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2};

use super::Shape;

pub(crate) fn im2col(input: &[f64], shape: Shape, kernel: usize) -> Array2<f64> {
    let (oh, ow) = (shape.height + 1 - kernel, shape.width + 1 - kernel);
    let mut cols = Array2::zeros((shape.channels * kernel * kernel, oh * ow));
    let plane = shape.height * shape.width;
    for c in 0..shape.channels {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (c * kernel + ky) * kernel + kx;
                let mut dst = cols.row_mut(row);
                let dst = dst.as_slice_mut().expect("row-major im2col buffer");
                for y in 0..oh {
                    let src = c * plane + (y + ky) * shape.width + kx;
                    dst[y * ow..(y + 1) * ow].copy_from_slice(&input[src..src + ow]);
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: &Array2<f64>, shape: Shape, kernel: usize, out: &mut [f64]) {
    let (oh, ow) = (shape.height + 1 - kernel, shape.width + 1 - kernel);
    let plane = shape.height * shape.width;
    for c in 0..shape.channels {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (c * kernel + ky) * kernel + kx;
                let src = cols.row(row);
                let src = src.as_slice().expect("row-major im2col buffer");
                for y in 0..oh {
                    let dst = c * plane + (y + ky) * shape.width + kx;
                    for (d, s) in out[dst..dst + ow].iter_mut().zip(&src[y * ow..(y + 1) * ow]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// `out = W * im2col(input) (+ bias)`, `out` laid out as (out_channels, oh·ow).
pub(crate) fn conv_forward(
    input: &[f64],
    shape: Shape,
    weight: &[f64],
    bias: Option<&[f64]>,
    out_channels: usize,
    kernel: usize,
    out: &mut [f64],
) {
    let cols = im2col(input, shape, kernel);
    let spatial = cols.ncols();
    let w = ArrayView2::from_shape((out_channels, cols.nrows()), weight).expect("conv weight shape");
    let mut o = ArrayViewMut2::from_shape((out_channels, spatial), out).expect("conv output shape");
    general_mat_mul(1.0, &w, &cols, 0.0, &mut o);
    if let Some(bias) = bias {
        for (mut row, b) in o.rows_mut().into_iter().zip(bias) {
            row += *b;
        }
    }
}

/// Accumulates `Wᵀ * upstream` folded back onto the input grid.
pub(crate) fn conv_backward_input(
    upstream: &[f64],
    shape: Shape,
    weight: &[f64],
    out_channels: usize,
    kernel: usize,
    din: &mut [f64],
) {
    let k = shape.channels * kernel * kernel;
    let spatial = upstream.len() / out_channels;
    let w = ArrayView2::from_shape((out_channels, k), weight).expect("conv weight shape");
    let up = ArrayView2::from_shape((out_channels, spatial), upstream).expect("conv upstream shape");
    let mut cols = Array2::zeros((k, spatial));
    general_mat_mul(1.0, &w.t(), &up, 0.0, &mut cols);
    col2im_add(&cols, shape, kernel, din);
}

pub(crate) fn conv_backward_params(
    input: &[f64],
    shape: Shape,
    upstream: &[f64],
    out_channels: usize,
    kernel: usize,
    dweight: &mut [f64],
    dbias: &mut [f64],
) {
    let cols = im2col(input, shape, kernel);
    let up = ArrayView2::from_shape((out_channels, cols.ncols()), upstream).expect("conv upstream shape");
    let mut dw = ArrayViewMut2::from_shape((out_channels, cols.nrows()), dweight).expect("conv weight shape");
    general_mat_mul(1.0, &up, &cols.t(), 1.0, &mut dw);
    for (db, row) in dbias.iter_mut().zip(up.rows()) {
        *db += row.sum();
    }
}

/// Batched dense layer: `out (n × outputs) = input (n × inputs) · Wᵀ (+ bias)`.
pub(crate) fn dense_forward(
    input: &[f64],
    n: usize,
    weight: &[f64],
    bias: Option<&[f64]>,
    inputs: usize,
    outputs: usize,
) -> Vec<f64> {
    let x = ArrayView2::from_shape((n, inputs), input).expect("dense input shape");
    let w = ArrayView2::from_shape((outputs, inputs), weight).expect("dense weight shape");
    let mut out = vec![0.0; n * outputs];
    {
        let mut o = ArrayViewMut2::from_shape((n, outputs), &mut out[..]).expect("dense output shape");
        general_mat_mul(1.0, &x, &w.t(), 0.0, &mut o);
        if let Some(bias) = bias {
            for mut row in o.rows_mut() {
                for (v, b) in row.iter_mut().zip(bias) {
                    *v += b;
                }
            }
        }
    }
    out
}

pub(crate) fn dense_backward_input(upstream: &[f64], n: usize, weight: &[f64], inputs: usize, outputs: usize) -> Vec<f64> {
    let up = ArrayView2::from_shape((n, outputs), upstream).expect("dense upstream shape");
    let w = ArrayView2::from_shape((outputs, inputs), weight).expect("dense weight shape");
    let mut out = vec![0.0; n * inputs];
    {
        let mut o = ArrayViewMut2::from_shape((n, inputs), &mut out[..]).expect("dense output shape");
        general_mat_mul(1.0, &up, &w, 0.0, &mut o);
    }
    out
}

pub(crate) fn dense_backward_params(
    input: &[f64],
    upstream: &[f64],
    n: usize,
    inputs: usize,
    outputs: usize,
    dweight: &mut [f64],
    dbias: &mut [f64],
) {
    let x = ArrayView2::from_shape((n, inputs), input).expect("dense input shape");
    let up = ArrayView2::from_shape((n, outputs), upstream).expect("dense upstream shape");
    let mut dw = ArrayViewMut2::from_shape((outputs, inputs), dweight).expect("dense weight shape");
    general_mat_mul(1.0, &up.t(), &x, 1.0, &mut dw);
    for row in up.rows() {
        for (db, g) in dbias.iter_mut().zip(row) {
            *db += g;
        }
    }
}

/// Max pooling with window = stride = `size` (floor mode). Returns the
/// output and, per output element, the flat index of the winning input
/// (first maximum in scan order).
pub(crate) fn maxpool_forward(input: &[f64], shape: Shape, size: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (shape.height / size, shape.width / size);
    let mut out = Vec::with_capacity(shape.channels * oh * ow);
    let mut route = Vec::with_capacity(out.capacity());
    for c in 0..shape.channels {
        let base = c * shape.height * shape.width;
        for y in 0..oh {
            for x in 0..ow {
                let mut best = base + y * size * shape.width + x * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let idx = base + (y * size + dy) * shape.width + x * size + dx;
                        if input[idx] > input[best] {
                            best = idx;
                        }
                    }
                }
                out.push(input[best]);
                route.push(best);
            }
        }
    }
    (out, route)
}

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn softplus(z: f64, beta: f64) -> f64 {
    let bz = beta * z;
    (bz.max(0.0) + (-bz.abs()).exp().ln_1p()) / beta
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
