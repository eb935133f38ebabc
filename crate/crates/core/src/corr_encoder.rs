//! Two-branch convolutional encoder that compresses each local 4D
//! correlation into a short embedding.
//!
//! The forward branch treats the query axes as spatial and the flattened
//! target axes as channels; the backward branch sees the transposed volume.

use crate::config::{Variant, CORR_SIDE, ENCODER_NORM_GROUPS, NORM_EPS, NUM_LEVELS};
use crate::correlation::{transpose_corr, LocalCorr4D};
use crate::error::{Error, Result};
use crate::numerics::{conv2d, group_norm, relu_in_place, Padding, Tensor};
use crate::weights::WeightsContainer;

struct Block<'w> {
    kernel: &'w Tensor,
    bias: &'w Tensor,
    gamma: &'w Tensor,
    beta: &'w Tensor,
    stride: usize,
    groups: usize,
}

struct Branch<'w> {
    blocks: Vec<Block<'w>>,
}

impl<'w> Branch<'w> {
    fn load(weights: &'w WeightsContainer, prefix: &str, variant: Variant) -> Result<Self> {
        let blocks = variant
            .encoder_blocks()
            .iter()
            .enumerate()
            .map(|(b, spec)| {
                let p = format!("{prefix}.block{b}");
                Ok(Block {
                    kernel: weights.get(&format!("{p}.conv.weight"))?,
                    bias: weights.get(&format!("{p}.conv.bias"))?,
                    gamma: weights.get(&format!("{p}.norm.gamma"))?,
                    beta: weights.get(&format!("{p}.norm.beta"))?,
                    stride: spec.stride,
                    groups: ENCODER_NORM_GROUPS.min(spec.channels),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    /// Run the conv stack on an `S×S×C` input and average-pool the result.
    fn run(&self, input: Tensor, mut trace: Option<&mut Vec<Vec<usize>>>) -> Result<Vec<f32>> {
        let mut x = input;
        if let Some(t) = trace.as_deref_mut() {
            t.push(x.shape().to_vec());
        }
        for blk in &self.blocks {
            x = conv2d(&x, blk.kernel, Some(blk.bias), blk.stride, Padding::Same)?;
            x = group_norm(&x, blk.groups, blk.gamma, blk.beta, NORM_EPS)?;
            relu_in_place(x.data_mut());
            if let Some(t) = trace.as_deref_mut() {
                t.push(x.shape().to_vec());
            }
        }
        let c = x.shape()[2];
        let pixels = (x.shape()[0] * x.shape()[1]) as f32;
        let mut pooled = vec![0.0f32; c];
        for px in x.data().chunks_exact(c) {
            pooled.iter_mut().zip(px).for_each(|(a, &v)| *a += v);
        }
        pooled.iter_mut().for_each(|v| *v /= pixels);
        Ok(pooled)
    }
}

fn check_volume(c: &LocalCorr4D) -> Result<()> {
    if c.vol.shape() != [CORR_SIDE; 4] {
        return Err(Error::shape(
            "corr_encoder",
            format!("expected {CORR_SIDE}×{CORR_SIDE}×{CORR_SIDE}×{CORR_SIDE} volume, got {:?}", c.vol.shape()),
        ));
    }
    Ok(())
}

/// Lay a volume out as query-spatial × target-channels.
fn query_spatial(c: &LocalCorr4D) -> Tensor {
    let t = transpose_corr(c);
    let s = t.vol.shape().to_vec();
    t.vol.reshape(vec![s[0], s[1], s[2] * s[3]]).expect("same element count")
}

/// Weights of the full encoder, borrowed once per model.
pub struct CorrEncoder<'w> {
    levels: Vec<(Branch<'w>, Branch<'w>)>,
    width: usize,
}

impl<'w> CorrEncoder<'w> {
    pub fn new(weights: &'w WeightsContainer, variant: Variant) -> Result<Self> {
        Self::build(weights, variant, false)
    }

    /// Diagnostic mode: the backward branch reuses the forward weights.
    pub fn with_shared_branches(weights: &'w WeightsContainer, variant: Variant) -> Result<Self> {
        Self::build(weights, variant, true)
    }

    fn build(weights: &'w WeightsContainer, variant: Variant, shared: bool) -> Result<Self> {
        let levels = (0..NUM_LEVELS)
            .map(|l| {
                let fwd = format!("encoder.level{l}.fwd");
                let bwd = if shared { fwd.clone() } else { format!("encoder.level{l}.bwd") };
                Ok((Branch::load(weights, &fwd, variant)?, Branch::load(weights, &bwd, variant)?))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            levels,
            width: variant.encoder_width(),
        })
    }

    pub fn embedding_width(&self) -> usize {
        self.levels.len() * 2 * self.width
    }

    /// `[fwd(L); bwd(Lᵀ)]` for one level.
    pub fn encode_level(&self, level: usize, c: &LocalCorr4D) -> Result<(Vec<f32>, Vec<f32>)> {
        check_volume(c)?;
        let (fwd, bwd) = &self.levels[level];
        let a = fwd.run(query_spatial(c), None)?;
        let b = bwd.run(query_spatial(&transpose_corr(c)), None)?;
        Ok((a, b))
    }

    /// Concatenated embedding over all levels for one frame.
    pub fn encode(&self, vols: &[LocalCorr4D]) -> Result<Vec<f32>> {
        if vols.len() != self.levels.len() {
            return Err(Error::InvalidArgument(format!(
                "encode_corr needs {} levels, got {}",
                self.levels.len(),
                vols.len()
            )));
        }
        let mut out = Vec::with_capacity(self.embedding_width());
        for (l, c) in vols.iter().enumerate() {
            let (a, b) = self.encode_level(l, c)?;
            out.extend(a);
            out.extend(b);
        }
        Ok(out)
    }
}

/// One encoder branch (forward weights of `level`) applied to `vol`.
pub fn encode_branch(vol: &LocalCorr4D, weights: &WeightsContainer, variant: Variant, level: usize) -> Result<Vec<f32>> {
    encode_branch_traced(vol, weights, variant, level).map(|(v, _)| v)
}

/// Like [`encode_branch`] and also returns the `H×W×C` shape after the
/// input reshape and after every block.
pub fn encode_branch_traced(
    vol: &LocalCorr4D,
    weights: &WeightsContainer,
    variant: Variant,
    level: usize,
) -> Result<(Vec<f32>, Vec<Vec<usize>>)> {
    check_volume(vol)?;
    let branch = Branch::load(weights, &format!("encoder.level{level}.fwd"), variant)?;
    let mut trace = Vec::new();
    let v = branch.run(query_spatial(vol), Some(&mut trace))?;
    Ok((v, trace))
}

pub fn encode_corr(vols: &[LocalCorr4D], weights: &WeightsContainer, variant: Variant) -> Result<Vec<f32>> {
    CorrEncoder::new(weights, variant)?.encode(vols)
}
