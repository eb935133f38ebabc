//! Stage I: initial track and occlusion logits from global correlation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{LEVEL_STRIDES, NUM_LEVELS};
use crate::correlation::GlobalCorr;
use crate::error::{Error, Result};
use crate::numerics::{conv2d_view, sigmoid, MapView, Padding};
use crate::weights::WeightsContainer;

/// Per-frame `(x, y)` positions in input pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub positions: Vec<[f32; 2]>,
}

impl Track {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Per-frame occlusion logits; `probabilities()` is the sigmoid view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcclusionTrack {
    pub logits: Vec<f32>,
}

impl OcclusionTrack {
    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn probabilities(&self) -> Vec<f32> {
        self.logits.iter().map(|&l| sigmoid(l)).collect()
    }
}

/// Result of the kernel softargmax, carried in `f64`.
#[derive(Clone, Debug)]
pub struct SoftArgmax {
    pub x: f64,
    pub y: f64,
    /// Hard argmax `(row, col)`, first in scan order.
    pub peak: (usize, usize),
    /// Normalized expectation weights, row-major.
    pub probs: Vec<f64>,
}

/// Kernel softargmax over a row-major `height×width` score map.
///
/// Weights are `exp(τ·m(i) − ‖i − m*‖² / 2σ²)` where `m*` is the hard
/// argmax; the Gaussian window is a constant mask (no gradient flows
/// through the argmax). Ties go to the first maximum in scan order; on a
/// constant map the window is centred on the grid. Output is in the map's
/// grid coordinates.
pub fn kernel_softargmax_f64(values: &[f64], height: usize, width: usize, tau: f64, sigma: f64) -> SoftArgmax {
    assert_eq!(values.len(), height * width, "softargmax map size");
    assert!(!values.is_empty(), "softargmax of an empty map");
    let mut peak_idx = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[peak_idx] {
            peak_idx = i;
        }
    }
    let flat = values.iter().all(|&v| v == values[peak_idx]);
    // A constant map carries no location; centre the window on the grid.
    let (py, px) = if flat {
        ((height - 1) as f64 / 2.0, (width - 1) as f64 / 2.0)
    } else {
        ((peak_idx / width) as f64, (peak_idx % width) as f64)
    };
    let inv2s2 = 1.0 / (2.0 * sigma * sigma);
    let mut logits: Vec<f64> = values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let (y, x) = ((i / width) as f64, (i % width) as f64);
            tau * v - ((y - py).powi(2) + (x - px).powi(2)) * inv2s2
        })
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        sum += *l;
    }
    let (mut ex, mut ey) = (0.0, 0.0);
    for (i, p) in logits.iter_mut().enumerate() {
        *p /= sum;
        ex += *p * (i % width) as f64;
        ey += *p * (i / width) as f64;
    }
    SoftArgmax {
        x: ex,
        y: ey,
        peak: (peak_idx / width, peak_idx % width),
        probs: logits,
    }
}

/// `(x, y)` of the kernel softargmax of a single-channel map.
pub fn kernel_softargmax(map: MapView<'_>, tau: f32, sigma: f32) -> (f32, f32) {
    debug_assert_eq!(map.channels, 1);
    let values: Vec<f64> = map.data.iter().map(|&v| v as f64).collect();
    let r = kernel_softargmax_f64(&values, map.height, map.width, tau as f64, sigma as f64);
    (r.x as f32, r.y as f32)
}

/// Analytic Jacobian of the softargmax output w.r.t. each map entry:
/// `∂x̄/∂m_i = τ p_i (x_i − x̄)`, likewise for `y`.
pub fn kernel_softargmax_grad(values: &[f64], height: usize, width: usize, tau: f64, sigma: f64) -> (Vec<f64>, Vec<f64>) {
    let r = kernel_softargmax_f64(values, height, width, tau, sigma);
    r.probs
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let (y, x) = ((i / width) as f64, (i % width) as f64);
            (tau * p * (x - r.x), tau * p * (y - r.y))
        })
        .unzip()
}

/// Fuse the `L` correlation channels, softargmax every frame and read the
/// occlusion logit from `[max-pool; avg-pool]` through the linear head.
pub fn init_track(gc: &GlobalCorr, weights: &WeightsContainer, tau: f32, sigma: f32) -> Result<(Track, OcclusionTrack)> {
    let fuse_w = weights.get("init.fuse.weight")?;
    let fuse_b = weights.get("init.fuse.bias")?;
    let occ_w = weights.get("init.occ.weight")?;
    let occ_b = weights.get("init.occ.bias")?;
    let levels = gc.maps.shape()[3];
    if levels != NUM_LEVELS || occ_w.shape() != [2 * levels, 1] {
        return Err(Error::shape(
            "init_track",
            format!("{levels} correlation levels vs occlusion head {:?}", occ_w.shape()),
        ));
    }
    let stride = LEVEL_STRIDES[0] as f32;
    let per_frame = (0..gc.num_frames())
        .into_par_iter()
        .map(|t| {
            let c = gc.frame(t);
            let fused = conv2d_view(c, fuse_w, Some(fuse_b), 1, Padding::Same)?;
            let (x, y) = kernel_softargmax(fused.map_view()?, tau, sigma);

            let mut pooled = vec![f32::NEG_INFINITY; levels];
            pooled.resize(2 * levels, 0.0);
            for cell in c.data.chunks_exact(levels) {
                for (l, &v) in cell.iter().enumerate() {
                    pooled[l] = pooled[l].max(v);
                    pooled[levels + l] += v;
                }
            }
            let n = (c.height * c.width) as f32;
            pooled[levels..].iter_mut().for_each(|v| *v /= n);
            let logit = occ_b.data()[0] + pooled.iter().zip(occ_w.data()).map(|(a, b)| a * b).sum::<f32>();
            Ok(([x * stride, y * stride], logit))
        })
        .collect::<Result<Vec<_>>>()?;
    let (positions, logits) = per_frame.into_iter().unzip();
    Ok((Track { positions }, OcclusionTrack { logits }))
}
