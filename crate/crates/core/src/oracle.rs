//! Naive reference kernels. Plain nested loops over logical indices with no
//! layout tricks; used by the self-test suite and by unit tests to check the
//! optimized kernels.

use crate::numerics::{Padding, Tensor};

pub fn conv2d_naive(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: Padding,
) -> Tensor {
    let (h, w, cin) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (kh, kw, _, cout) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2], kernel.shape()[3]);
    let (oh, ow, pt, pl) = match padding {
        Padding::Valid => ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0),
        Padding::Same => {
            let oh = h.div_ceil(stride);
            let ow = w.div_ceil(stride);
            let ph = ((oh - 1) * stride + kh).saturating_sub(h);
            let pw = ((ow - 1) * stride + kw).saturating_sub(w);
            (oh, ow, ph / 2, pw / 2)
        }
    };
    let mut out = Tensor::zeros(&[oh, ow, cout]);
    for oy in 0..oh {
        for ox in 0..ow {
            for co in 0..cout {
                let mut acc = bias.map_or(0.0, |b| b.at(&[co]));
                for ky in 0..kh {
                    for kx in 0..kw {
                        for ci in 0..cin {
                            let iy = (oy * stride + ky) as i64 - pt as i64;
                            let ix = (ox * stride + kx) as i64 - pl as i64;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                acc += input.at(&[iy as usize, ix as usize, ci]) * kernel.at(&[ky, kx, ci, co]);
                            }
                        }
                    }
                }
                out.set(&[oy, ox, co], acc);
            }
        }
    }
    out
}

pub fn linear_naive(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
    let (din, dout) = (weight.shape()[0], weight.shape()[1]);
    let rows = x.len() / din;
    let mut out = vec![0.0f32; rows * dout];
    for r in 0..rows {
        for o in 0..dout {
            let mut acc = bias.at(&[o]);
            for i in 0..din {
                acc += x.data()[r * din + i] * weight.at(&[i, o]);
            }
            out[r * dout + o] = acc;
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = dout;
    Tensor::new(shape, out).unwrap()
}

pub fn group_norm_naive(x: &Tensor, groups: usize, gamma: &Tensor, beta: &Tensor, eps: f32) -> Tensor {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let per = c / groups;
    let mut out = x.clone();
    for g in 0..groups {
        let mut vals = Vec::new();
        for y in 0..h {
            for xx in 0..w {
                for ch in g * per..(g + 1) * per {
                    vals.push(x.at(&[y, xx, ch]) as f64);
                }
            }
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
        for y in 0..h {
            for xx in 0..w {
                for ch in g * per..(g + 1) * per {
                    let n = (x.at(&[y, xx, ch]) as f64 - mean) / (var + eps as f64).sqrt();
                    out.set(&[y, xx, ch], n as f32 * gamma.at(&[ch]) + beta.at(&[ch]));
                }
            }
        }
    }
    out
}

/// Bilinear sample of one channel vector, written out from the four corner
/// weights directly.
pub fn bilinear_naive(map: &Tensor, x: f32, y: f32) -> Vec<f32> {
    let (h, w, c) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let x = x.max(0.0).min((w - 1) as f32);
    let y = y.max(0.0).min((h - 1) as f32);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = if x0 + 1 < w { x0 + 1 } else { x0 };
    let y1 = if y0 + 1 < h { y0 + 1 } else { y0 };
    let ax = x - x0 as f32;
    let ay = y - y0 as f32;
    (0..c)
        .map(|ch| {
            map.at(&[y0, x0, ch]) * (1.0 - ax) * (1.0 - ay)
                + map.at(&[y0, x1, ch]) * ax * (1.0 - ay)
                + map.at(&[y1, x0, ch]) * (1.0 - ax) * ay
                + map.at(&[y1, x1, ch]) * ax * ay
        })
        .collect()
}

pub fn cosine_naive(a: &[f32], b: &[f32]) -> f32 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    (dot / (na * nb).max(1e-8)) as f32
}
