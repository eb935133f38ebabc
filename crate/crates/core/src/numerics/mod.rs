//! Deterministic `f32` kernels shared by every stage of the tracker.
//!
//! Feature maps are `H×W×C` (channels fastest). Convolution kernels are
//! `kh×kw×Cin×Cout` so the innermost loop runs over contiguous output
//! channels.

mod tensor;

pub use tensor::{MapView, Tensor};

use crate::error::{Error, Result};

/// Number of channels produced by [`sinusoidal_encode`].
pub const SINUSOID_CHANNELS: usize = 21;
const SINUSOID_OCTAVES: usize = 10;

pub const GROUP_NORM_EPS: f32 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

impl Padding {
    /// Output extent and leading pad for one spatial axis.
    pub fn plan(self, extent: usize, kernel: usize, stride: usize) -> Option<(usize, usize)> {
        match self {
            Padding::Same => {
                let out = extent.div_ceil(stride);
                let total = ((out - 1) * stride + kernel).saturating_sub(extent);
                Some((out, total / 2))
            }
            Padding::Valid => {
                if kernel > extent {
                    None
                } else {
                    Some(((extent - kernel) / stride + 1, 0))
                }
            }
        }
    }
}

/// Kernel shape `kh×kw×Cin×Cout` as a tuple.
fn kernel_dims(kernel: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *kernel.shape() {
        [kh, kw, ci, co] => Ok((kh, kw, ci, co)),
        ref s => Err(Error::shape("conv2d", format!("kernel must be kh×kw×Cin×Cout, got {s:?}"))),
    }
}

pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor> {
    conv2d_view(input.map_view()?, kernel, bias, stride, padding)
}

/// 2D cross-correlation of a feature map.
pub fn conv2d_view(
    input: MapView<'_>,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor> {
    let (kh, kw, cin, cout) = kernel_dims(kernel)?;
    if stride == 0 {
        return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
    }
    if cin != input.channels {
        return Err(Error::shape(
            "conv2d",
            format!("input has {} channels, kernel expects Cin={cin}", input.channels),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::shape("conv2d", format!("bias {:?} vs Cout={cout}", b.shape())));
        }
    }
    let plan = |extent, k| padding.plan(extent, k, stride);
    let ((oh, pad_y), (ow, pad_x)) = match (plan(input.height, kh), plan(input.width, kw)) {
        (Some(py), Some(px)) => (py, px),
        _ => {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "kernel {kh}×{kw} exceeds input {}×{} under valid padding",
                    input.height, input.width
                ),
            ))
        }
    };

    let k = kernel.data();
    let mut out = vec![0.0f32; oh * ow * cout];
    for oy in 0..oh {
        for ox in 0..ow {
            let acc = &mut out[(oy * ow + ox) * cout..][..cout];
            if let Some(b) = bias {
                acc.copy_from_slice(b.data());
            }
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad_y as isize;
                if iy < 0 || iy >= input.height as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad_x as isize;
                    if ix < 0 || ix >= input.width as isize {
                        continue;
                    }
                    let pixel = input.cell(iy as usize, ix as usize);
                    let taps = &k[(ky * kw + kx) * cin * cout..][..cin * cout];
                    for (&v, row) in pixel.iter().zip(taps.chunks_exact(cout)) {
                        for (a, &w) in acc.iter_mut().zip(row) {
                            *a += v * w;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![oh, ow, cout], out)
}

/// Normalize `x[H×W×C]` over groups of `C/groups` channels and the spatial
/// extent, then apply the per-channel affine `gamma, beta`.
pub fn group_norm(x: &Tensor, groups: usize, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    let c = match *x.shape() {
        [_, _, c] => c,
        ref s => return Err(Error::shape("group_norm", format!("expected H×W×C, got {s:?}"))),
    };
    if groups == 0 || c % groups != 0 {
        return Err(Error::InvalidArgument(format!(
            "group_norm: {c} channels not divisible into {groups} groups"
        )));
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            "group_norm",
            format!("affine params {:?}/{:?} vs C={c}", gamma.shape(), beta.shape()),
        ));
    }
    let mut out = x.clone();
    normalize_groups(out.data_mut(), c, groups, eps);
    for px in out.data_mut().chunks_exact_mut(c) {
        for ((v, &g), &b) in px.iter_mut().zip(gamma.data()).zip(beta.data()) {
            *v = *v * g + b;
        }
    }
    Ok(out)
}

/// Per-channel normalization over the spatial extent, no affine.
pub fn instance_norm(x: &mut Tensor, eps: f32) -> Result<()> {
    let c = match *x.shape() {
        [_, _, c] => c,
        ref s => return Err(Error::shape("instance_norm", format!("expected H×W×C, got {s:?}"))),
    };
    normalize_groups(x.data_mut(), c, c, eps);
    Ok(())
}

fn normalize_groups(data: &mut [f32], channels: usize, groups: usize, eps: f32) {
    let per_group = channels / groups;
    let pixels = data.len() / channels;
    let count = (pixels * per_group) as f64;
    let mut mean = vec![0.0f64; groups];
    let mut sq = vec![0.0f64; groups];
    for px in data.chunks_exact(channels) {
        for (ch, &v) in px.iter().enumerate() {
            mean[ch / per_group] += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for px in data.chunks_exact(channels) {
        for (ch, &v) in px.iter().enumerate() {
            let d = v as f64 - mean[ch / per_group];
            sq[ch / per_group] += d * d;
        }
    }
    let inv_std: Vec<f64> = sq
        .iter()
        .map(|s| 1.0 / (s / count + eps as f64).sqrt())
        .collect();
    for px in data.chunks_exact_mut(channels) {
        for (ch, v) in px.iter_mut().enumerate() {
            let g = ch / per_group;
            *v = ((*v as f64 - mean[g]) * inv_std[g]) as f32;
        }
    }
}

/// Layer normalization along the last axis.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    let d = *x.shape().last().expect("tensor rank >= 1");
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::shape(
            "layer_norm",
            format!("affine params {:?}/{:?} vs D={d}", gamma.shape(), beta.shape()),
        ));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(d) {
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps as f64).sqrt();
        for ((v, &g), &b) in row.iter_mut().zip(gamma.data()).zip(beta.data()) {
            *v = ((*v as f64 - mean) * inv) as f32 * g + b;
        }
    }
    Ok(out)
}

/// Affine map along the last axis: `x · W + b` with `W` stored `Din×Dout`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (din, dout) = match *weight.shape() {
        [i, o] => (i, o),
        ref s => return Err(Error::shape("linear", format!("weight must be Din×Dout, got {s:?}"))),
    };
    let last = *x.shape().last().expect("tensor rank >= 1");
    if last != din {
        return Err(Error::shape(
            "linear",
            format!("input trailing extent {last} vs Din={din}"),
        ));
    }
    if bias.shape() != [dout] {
        return Err(Error::shape("linear", format!("bias {:?} vs Dout={dout}", bias.shape())));
    }
    let rows = x.len() / din;
    let mut out = vec![0.0f32; rows * dout];
    for (xr, or) in x.data().chunks_exact(din).zip(out.chunks_exact_mut(dout)) {
        or.copy_from_slice(bias.data());
        for (&v, wr) in xr.iter().zip(weight.data().chunks_exact(dout)) {
            for (o, &w) in or.iter_mut().zip(wr) {
                *o += v * w;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = dout;
    Tensor::new(shape, out)
}

/// Sample `map[H×W×C]` at each `(x, y)`; coordinates are clamped into
/// `[0, W−1]×[0, H−1]` before interpolation.
pub fn bilinear_sample(map: &Tensor, points: &[(f32, f32)]) -> Result<Tensor> {
    let view = map.map_view()?;
    if points.is_empty() {
        return Err(Error::InvalidArgument("bilinear_sample: no points".into()));
    }
    let c = view.channels;
    let mut out = vec![0.0f32; points.len() * c];
    for (&(x, y), o) in points.iter().zip(out.chunks_exact_mut(c)) {
        view.sample_into(x, y, o);
    }
    Tensor::new(vec![points.len(), c], out)
}

/// `[x, sin(2^0 x), cos(2^0 x), …, sin(2^9 x), cos(2^9 x)]`.
pub fn sinusoidal_encode(x: f32) -> [f32; SINUSOID_CHANNELS] {
    let mut out = [0.0f32; SINUSOID_CHANNELS];
    out[0] = x;
    let xd = x as f64;
    for j in 0..SINUSOID_OCTAVES {
        let arg = xd * (1u32 << j) as f64;
        out[1 + 2 * j] = arg.sin() as f32;
        out[2 + 2 * j] = arg.cos() as f32;
    }
    out
}

/// Max-subtracted softmax of one row. `-inf` entries become exactly 0; a
/// row that is entirely `-inf` becomes all zeros.
pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if max == f32::NEG_INFINITY {
        row.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    row.iter_mut().for_each(|v| *v *= inv);
}

pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::InvalidArgument(format!(
            "softmax axis {axis} out of range for rank {}",
            shape.len()
        )));
    }
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.clone();
    let data = out.data_mut();
    let mut lane = vec![0.0f32; n];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            for (k, l) in lane.iter_mut().enumerate() {
                *l = data[base + k * inner];
            }
            softmax_in_place(&mut lane);
            for (k, &l) in lane.iter().enumerate() {
                data[base + k * inner] = l;
            }
        }
    }
    Ok(out)
}

pub fn relu_in_place(x: &mut [f32]) {
    x.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Tanh approximation of GELU.
pub fn gelu_in_place(x: &mut [f32]) {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    for v in x.iter_mut() {
        let u = *v;
        *v = 0.5 * u * (1.0 + (C * (u + 0.044_715 * u * u * u)).tanh());
    }
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Cosine similarity with the denominator floored at `1e-8`.
#[inline]
pub fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let mut dot = 0.0f32;
    let mut na = 0.0f32;
    let mut nb = 0.0f32;
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    dot / (na.sqrt() * nb.sqrt()).max(COSINE_FLOOR)
}

pub const COSINE_FLOOR: f32 = 1e-8;
