//! Forward and backward kernels for the fixed layer set.
//!
//! Every forward kernel is a pure function of its arguments. Backward kernels
//! take the upstream gradient and return gradients for each input in the same
//! order as the forward signature.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Elementwise or windowed activation selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    MaxPool2x2,
    Softmax,
}

pub fn activation(x: &Tensor, kind: Activation) -> Result<Tensor> {
    match kind {
        Activation::Relu => Ok(relu(x)),
        Activation::Sigmoid => Ok(sigmoid(x)),
        Activation::MaxPool2x2 => max_pool2x2(x).map(|(out, _)| out),
        Activation::Softmax => Ok(softmax(x)),
    }
}

/// `out[b,o] = Σ_i input[b,i]·weights[i,o] + bias[o]`.
pub fn dense_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (batch, fan_in, fan_out) = dense_dims(input, weights, bias)?;
    let (x, w, b) = (input.data(), weights.data(), bias.data());
    let mut out = vec![0.0; batch * fan_out];
    for (row, out_row) in out.chunks_exact_mut(fan_out).enumerate() {
        out_row.copy_from_slice(b);
        let x_row = &x[row * fan_in..(row + 1) * fan_in];
        for (i, &xi) in x_row.iter().enumerate() {
            let w_row = &w[i * fan_out..(i + 1) * fan_out];
            for (o, &wio) in out_row.iter_mut().zip(w_row) {
                *o += xi * wio;
            }
        }
    }
    Tensor::new(vec![batch, fan_out], out)
}

/// Returns `(grad_input, grad_weights, grad_bias)`. The input gradient is only
/// computed when `need_input` is set.
pub fn dense_backward(
    input: &Tensor,
    weights: &Tensor,
    grad_out: &Tensor,
    need_input: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let batch = input.rows();
    let fan_in = input.row_len();
    let fan_out = weights.shape()[1];
    if grad_out.shape() != [batch, fan_out] {
        return Err(Error::dim(format!(
            "dense backward: grad {:?} vs expected [{batch}, {fan_out}]",
            grad_out.shape()
        )));
    }
    let (x, w, g) = (input.data(), weights.data(), grad_out.data());
    let mut gw = vec![0.0; fan_in * fan_out];
    let mut gb = vec![0.0; fan_out];
    for row in 0..batch {
        let g_row = &g[row * fan_out..(row + 1) * fan_out];
        for (acc, &go) in gb.iter_mut().zip(g_row) {
            *acc += go;
        }
        let x_row = &x[row * fan_in..(row + 1) * fan_in];
        for (i, &xi) in x_row.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let gw_row = &mut gw[i * fan_out..(i + 1) * fan_out];
            for (acc, &go) in gw_row.iter_mut().zip(g_row) {
                *acc += xi * go;
            }
        }
    }
    let gin = if need_input {
        let mut gin = vec![0.0; batch * fan_in];
        for row in 0..batch {
            let g_row = &g[row * fan_out..(row + 1) * fan_out];
            for i in 0..fan_in {
                let w_row = &w[i * fan_out..(i + 1) * fan_out];
                gin[row * fan_in + i] = w_row.iter().zip(g_row).map(|(a, b)| a * b).sum();
            }
        }
        Some(Tensor::new(input.shape().to_vec(), gin)?)
    } else {
        None
    };
    Ok((
        gin,
        Tensor::new(weights.shape().to_vec(), gw)?,
        Tensor::new(vec![fan_out], gb)?,
    ))
}

fn dense_dims(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize)> {
    if input.ndim() != 2 || weights.ndim() != 2 || bias.ndim() != 1 {
        return Err(Error::dim(format!(
            "dense expects input [B, I], weights [I, O], bias [O]; got {:?}, {:?}, {:?}",
            input.shape(),
            weights.shape(),
            bias.shape()
        )));
    }
    let (fan_in, fan_out) = (weights.shape()[0], weights.shape()[1]);
    if input.shape()[1] != fan_in || bias.shape()[0] != fan_out {
        return Err(Error::dim(format!(
            "dense shape mismatch: input {:?}, weights {:?}, bias {:?}",
            input.shape(),
            weights.shape(),
            bias.shape()
        )));
    }
    Ok((input.shape()[0], fan_in, fan_out))
}

struct ConvDims {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    filters: usize,
    k: usize,
    out_h: usize,
    out_w: usize,
}

fn conv_dims(input: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<ConvDims> {
    if input.ndim() != 4 || kernels.ndim() != 4 || bias.ndim() != 1 {
        return Err(Error::dim(format!(
            "conv2d expects input [B, C, H, W], kernels [F, C, K, K], bias [F]; got {:?}, {:?}, {:?}",
            input.shape(),
            kernels.shape(),
            bias.shape()
        )));
    }
    let &[batch, channels, height, width] = input.shape() else { unreachable!() };
    let &[filters, kc, kh, kw] = kernels.shape() else { unreachable!() };
    if kc != channels || kh != kw || bias.shape()[0] != filters {
        return Err(Error::dim(format!(
            "conv2d shape mismatch: input {:?}, kernels {:?}, bias {:?}",
            input.shape(),
            kernels.shape(),
            bias.shape()
        )));
    }
    if kh > height || kw > width {
        return Err(Error::dim(format!(
            "conv2d kernel {kh}x{kw} larger than input {height}x{width}"
        )));
    }
    Ok(ConvDims {
        batch,
        channels,
        height,
        width,
        filters,
        k: kh,
        out_h: height - kh + 1,
        out_w: width - kw + 1,
    })
}

/// Valid (unpadded) stride-1 cross-correlation plus per-filter bias.
pub fn conv2d_forward(input: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let d = conv_dims(input, kernels, bias)?;
    let (x, w, b) = (input.data(), kernels.data(), bias.data());
    let plane_in = d.height * d.width;
    let plane_out = d.out_h * d.out_w;
    let mut out = vec![0.0; d.batch * d.filters * plane_out];
    for n in 0..d.batch {
        for f in 0..d.filters {
            let o = &mut out[(n * d.filters + f) * plane_out..][..plane_out];
            o.fill(b[f]);
            for c in 0..d.channels {
                let xin = &x[(n * d.channels + c) * plane_in..][..plane_in];
                let kern = &w[(f * d.channels + c) * d.k * d.k..][..d.k * d.k];
                for p in 0..d.k {
                    for q in 0..d.k {
                        let wv = kern[p * d.k + q];
                        for i in 0..d.out_h {
                            let src = &xin[(i + p) * d.width + q..][..d.out_w];
                            let dst = &mut o[i * d.out_w..][..d.out_w];
                            for (acc, &xv) in dst.iter_mut().zip(src) {
                                *acc += wv * xv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![d.batch, d.filters, d.out_h, d.out_w], out)
}

/// Returns `(grad_input, grad_kernels, grad_bias)`.
pub fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    grad_out: &Tensor,
    need_input: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let d = conv_dims(input, kernels, bias)?;
    if grad_out.shape() != [d.batch, d.filters, d.out_h, d.out_w] {
        return Err(Error::dim(format!(
            "conv2d backward: grad {:?} does not match output",
            grad_out.shape()
        )));
    }
    let (x, w, g) = (input.data(), kernels.data(), grad_out.data());
    let plane_in = d.height * d.width;
    let plane_out = d.out_h * d.out_w;
    let kk = d.k * d.k;
    let mut gk = vec![0.0; kernels.len()];
    let mut gb = vec![0.0; d.filters];
    let mut gin = if need_input { vec![0.0; input.len()] } else { Vec::new() };
    for n in 0..d.batch {
        for f in 0..d.filters {
            let go = &g[(n * d.filters + f) * plane_out..][..plane_out];
            gb[f] += go.iter().sum::<f64>();
            for c in 0..d.channels {
                let xin = &x[(n * d.channels + c) * plane_in..][..plane_in];
                let base = (f * d.channels + c) * kk;
                for p in 0..d.k {
                    for q in 0..d.k {
                        let mut acc = 0.0;
                        for i in 0..d.out_h {
                            let src = &xin[(i + p) * d.width + q..][..d.out_w];
                            let gr = &go[i * d.out_w..][..d.out_w];
                            acc += src.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>();
                        }
                        gk[base + p * d.k + q] += acc;
                        if need_input {
                            let wv = w[base + p * d.k + q];
                            let gi = &mut gin[(n * d.channels + c) * plane_in..][..plane_in];
                            for i in 0..d.out_h {
                                let dst = &mut gi[(i + p) * d.width + q..][..d.out_w];
                                let gr = &go[i * d.out_w..][..d.out_w];
                                for (a, &gv) in dst.iter_mut().zip(gr) {
                                    *a += wv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let gin = if need_input {
        Some(Tensor::new(input.shape().to_vec(), gin)?)
    } else {
        None
    };
    Ok((
        gin,
        Tensor::new(kernels.shape().to_vec(), gk)?,
        Tensor::new(vec![d.filters], gb)?,
    ))
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.shape().to_vec(), data).expect("shape preserved")
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// Gradient of sigmoid given its *output* `y`.
pub fn sigmoid_backward(output: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&y, &g)| g * y * (1.0 - y))
        .collect();
    Tensor::new(output.shape().to_vec(), data).expect("shape preserved")
}

/// Softmax over the last dimension.
pub fn softmax(x: &Tensor) -> Tensor {
    let last = *x.shape().last().expect("non-empty shape");
    let mut out = x.data().to_vec();
    for row in out.chunks_exact_mut(last) {
        softmax_in_place(row);
    }
    Tensor::new(x.shape().to_vec(), out).expect("shape preserved")
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// 2x2 max pooling with stride 2 over `[B, C, H, W]` (or `[C, H, W]`).
///
/// Returns the pooled tensor and, for each output cell, the flat input index it
/// was taken from (first maximum in row-major window order).
pub fn max_pool2x2(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (lead, h, w) = match x.shape() {
        [b, c, h, w] => (b * c, *h, *w),
        [c, h, w] => (*c, *h, *w),
        s => {
            return Err(Error::dim(format!(
                "max_pool2x2 expects [B, C, H, W] or [C, H, W], got {s:?}"
            )))
        }
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim(format!(
            "max_pool2x2 needs even spatial dims, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let data = x.data();
    let mut out = Vec::with_capacity(lead * oh * ow);
    let mut arg = Vec::with_capacity(lead * oh * ow);
    for plane in 0..lead {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + di) * w + 2 * j + dj;
                    if data[idx] > data[best] {
                        best = idx;
                    }
                }
                out.push(data[best]);
                arg.push(best);
            }
        }
    }
    let mut shape = x.shape().to_vec();
    let n = shape.len();
    shape[n - 2] = oh;
    shape[n - 1] = ow;
    Ok((Tensor::new(shape, out)?, arg))
}

pub fn max_pool2x2_backward(input: &Tensor, argmax: &[usize], grad_out: &Tensor) -> Tensor {
    let mut gin = vec![0.0; input.len()];
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        gin[idx] += g;
    }
    Tensor::new(input.shape().to_vec(), gin).expect("shape preserved")
}
