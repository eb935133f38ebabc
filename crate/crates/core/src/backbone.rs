//! Per-frame feature pyramids at strides 2, 4 and 8.

use rayon::prelude::*;

use crate::config::{BACKBONE_WIDTHS, LEVEL_STRIDES, NORM_EPS, NUM_LEVELS};
use crate::error::{Error, Result};
use crate::numerics::{conv2d_view, instance_norm, relu_in_place, MapView, Padding, Tensor};
use crate::weights::WeightsContainer;

/// RGB video, `T×H×W×3`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    frames: Tensor,
    pub frame_rate: Option<f32>,
}

impl Video {
    pub fn new(frames: Tensor) -> Result<Self> {
        match *frames.shape() {
            [_, h, w, 3] if h % 8 == 0 && w % 8 == 0 => Ok(Self {
                frames,
                frame_rate: None,
            }),
            [_, h, w, 3] => Err(Error::InvalidArgument(format!(
                "video extents {h}×{w} must be divisible by 8"
            ))),
            ref s => Err(Error::shape("video", format!("expected T×H×W×3, got {s:?}"))),
        }
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn frame(&self, t: usize) -> MapView<'_> {
        self.frames.frame(t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    levels: Vec<Tensor>,
    strides: [usize; NUM_LEVELS],
}

impl FeaturePyramid {
    /// Stack per-frame level maps (`frames[t][l]`, each `H^l×W^l×C^l`).
    fn from_frames(frames: Vec<Vec<Tensor>>) -> Self {
        let t = frames.len();
        let levels = (0..NUM_LEVELS)
            .map(|l| {
                let shape = frames[0][l].shape().to_vec();
                let mut data = Vec::with_capacity(t * frames[0][l].len());
                for f in &frames {
                    data.extend_from_slice(f[l].data());
                }
                Tensor::new([&[t][..], &shape].concat(), data).expect("consistent level shapes")
            })
            .collect();
        Self {
            levels,
            strides: LEVEL_STRIDES,
        }
    }

    pub fn num_frames(&self) -> usize {
        self.levels[0].shape()[0]
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, l: usize) -> &Tensor {
        &self.levels[l]
    }

    pub fn stride(&self, l: usize) -> usize {
        self.strides[l]
    }

    pub fn strides(&self) -> [usize; NUM_LEVELS] {
        self.strides
    }

    pub fn frame(&self, l: usize, t: usize) -> MapView<'_> {
        self.levels[l].frame(t)
    }

    pub fn channels(&self, l: usize) -> usize {
        self.levels[l].shape()[3]
    }
}

/// Learned backbone: three conv(3×3, stride 2) → instance norm → ReLU blocks.
pub fn extract_pyramid(video: &Video, weights: &WeightsContainer) -> Result<FeaturePyramid> {
    let kernels = (0..NUM_LEVELS)
        .map(|b| weights.get(&format!("backbone.block{b}.conv.weight")))
        .collect::<Result<Vec<_>>>()?;
    for (b, k) in kernels.iter().enumerate() {
        if k.shape()[..].last() != Some(&BACKBONE_WIDTHS[b]) {
            return Err(Error::WeightShape {
                name: format!("backbone.block{b}.conv.weight"),
                expected: vec![3, 3, if b == 0 { 3 } else { BACKBONE_WIDTHS[b - 1] }, BACKBONE_WIDTHS[b]],
                got: k.shape().to_vec(),
            });
        }
    }
    let frames = (0..video.num_frames())
        .into_par_iter()
        .map(|t| {
            let mut levels = Vec::with_capacity(NUM_LEVELS);
            let mut x = conv_block(video.frame(t), kernels[0])?;
            for k in &kernels[1..] {
                let next = conv_block(x.map_view()?, k)?;
                levels.push(x);
                x = next;
            }
            levels.push(x);
            Ok(levels)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FeaturePyramid::from_frames(frames))
}

fn conv_block(input: MapView<'_>, kernel: &Tensor) -> Result<Tensor> {
    let mut y = conv2d_view(input, kernel, None, 2, Padding::Same)?;
    instance_norm(&mut y, NORM_EPS)?;
    relu_in_place(y.data_mut());
    Ok(y)
}

/// Parameter-free backbone: the level-`l` feature of a cell is the raw RGB
/// patch of `s×s` pixels (s = stride) centred on the cell's pixel position
/// `s·(x, y)`, flattened `(dy, dx, rgb)`. Border pixels are clamped.
pub fn patch_identity_pyramid(video: &Video) -> FeaturePyramid {
    let (h, w) = (video.height(), video.width());
    let frames = (0..video.num_frames())
        .into_par_iter()
        .map(|t| {
            let img = video.frame(t);
            LEVEL_STRIDES
                .iter()
                .map(|&s| {
                    let (lh, lw, c) = (h / s, w / s, 3 * s * s);
                    let mut data = Vec::with_capacity(lh * lw * c);
                    let half = (s / 2) as isize;
                    for i in 0..lh {
                        for j in 0..lw {
                            for dy in 0..s as isize {
                                let y = (i as isize * s as isize - half + dy).clamp(0, h as isize - 1);
                                for dx in 0..s as isize {
                                    let x = (j as isize * s as isize - half + dx).clamp(0, w as isize - 1);
                                    data.extend_from_slice(img.cell(y as usize, x as usize));
                                }
                            }
                        }
                    }
                    Tensor::new(vec![lh, lw, c], data).unwrap()
                })
                .collect()
        })
        .collect();
    FeaturePyramid::from_frames(frames)
}
