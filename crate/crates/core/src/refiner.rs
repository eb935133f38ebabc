//! Stage II: iterative residual refinement.
//!
//! Each iteration re-samples local 4D correlation around the current track,
//! encodes it, and runs a small Transformer over the frame axis. Attention
//! heads are split into a left-looking and a right-looking group, each with
//! a linear distance penalty, so nothing in the model depends on the video
//! length.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::FeaturePyramid;
use crate::config::{
    Variant, CORR_RADIUS, CORR_SIDE, LEVEL_STRIDES, MLP_RATIO, NORM_EPS, REFINE_ITERATIONS,
    TRANSFORMER_LAYERS,
};
use crate::corr_encoder::CorrEncoder;
use crate::correlation::{MacCounter, Neighborhood, QueryContext, QueryPoint};
use crate::error::{Error, Result};
use crate::numerics::{gelu_in_place, layer_norm, linear, sinusoidal_encode, softmax_in_place, Tensor, SINUSOID_CHANNELS};
use crate::track_init::{kernel_softargmax_f64, OcclusionTrack, Track};
use crate::weights::WeightsContainer;

/// Width of the per-frame token before the input projection.
pub fn token_width(variant: Variant) -> usize {
    4 * SINUSOID_CHANNELS + 1 + variant.embedding_width()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinerConfig {
    pub n_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub iterations: usize,
    pub variant: Variant,
}

impl RefinerConfig {
    pub fn new(variant: Variant) -> Self {
        Self {
            n_layers: TRANSFORMER_LAYERS,
            hidden: variant.hidden(),
            heads: variant.heads(),
            mlp_ratio: MLP_RATIO,
            iterations: REFINE_ITERATIONS,
            variant,
        }
    }

    pub fn with_iterations(mut self, k: usize) -> Self {
        self.iterations = k;
        self
    }

    fn check(&self) -> Result<()> {
        if self.heads == 0 || !self.heads.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("head count {} must be even", self.heads)));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::InvalidArgument(format!(
                "hidden {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }
}

/// Per-head distance penalty slopes. Heads `0..n/2` look left, the rest
/// look right.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasTable {
    pub slopes: Vec<f32>,
}

impl BiasTable {
    /// Geometric schedule `2^(−8(j+1)/n)` within each group of `n` heads.
    pub fn geometric(heads: usize) -> Self {
        let n = heads / 2;
        let group: Vec<f32> = (0..n).map(|j| 2f32.powf(-8.0 * (j + 1) as f32 / n as f32)).collect();
        Self {
            slopes: group.iter().chain(&group).copied().collect(),
        }
    }
}

/// `N_h×T×T` additive attention bias (row = query frame, column = key frame).
pub fn build_bias(frames: usize, cfg: &RefinerConfig, table: &BiasTable) -> Tensor {
    let heads = cfg.heads;
    assert_eq!(table.slopes.len(), heads, "one slope per head");
    let half = heads / 2;
    let mut bias = Tensor::zeros(&[heads, frames, frames]);
    let data = bias.data_mut();
    for h in 0..heads {
        let s = table.slopes[h];
        let left = h < half;
        for t1 in 0..frames {
            for t2 in 0..frames {
                let blocked = if left { t1 < t2 } else { t1 > t2 };
                data[(h * frames + t1) * frames + t2] = if blocked {
                    f32::NEG_INFINITY
                } else {
                    -s * t1.abs_diff(t2) as f32
                };
            }
        }
    }
    bias
}

/// Projection weights of one attention layer.
pub struct AttentionWeights<'w> {
    pub wq: &'w Tensor,
    pub bq: &'w Tensor,
    pub wk: &'w Tensor,
    pub bk: &'w Tensor,
    pub wv: &'w Tensor,
    pub bv: &'w Tensor,
    pub wo: &'w Tensor,
    pub bo: &'w Tensor,
}

impl<'w> AttentionWeights<'w> {
    pub fn load(weights: &'w WeightsContainer, prefix: &str) -> Result<Self> {
        let g = |n: &str| weights.get(&format!("{prefix}.{n}"));
        Ok(Self {
            wq: g("wq")?,
            bq: g("bq")?,
            wk: g("wk")?,
            bk: g("bk")?,
            wv: g("wv")?,
            bv: g("bv")?,
            wo: g("wo")?,
            bo: g("bo")?,
        })
    }
}

/// Multi-head attention with a per-head additive bias. Returns the output
/// and the `N_h×T×T` attention weights.
pub fn attention_with_weights(x: &Tensor, w: &AttentionWeights<'_>, bias: &Tensor) -> Result<(Tensor, Tensor)> {
    let [frames, hidden] = *x.shape() else {
        return Err(Error::shape("attention", format!("expected T×hidden, got {:?}", x.shape())));
    };
    let heads = bias.shape()[0];
    if bias.shape() != [heads, frames, frames] {
        return Err(Error::shape(
            "attention",
            format!("bias {:?} for {frames} frames", bias.shape()),
        ));
    }
    if heads == 0 || hidden % heads != 0 {
        return Err(Error::shape("attention", format!("hidden {hidden} vs {heads} heads")));
    }
    let d = hidden / heads;
    let scale = 1.0 / (d as f32).sqrt();
    let q = linear(x, w.wq, w.bq)?;
    let k = linear(x, w.wk, w.bk)?;
    let v = linear(x, w.wv, w.bv)?;
    let (q, k, v) = (q.data(), k.data(), v.data());

    let mut probs = vec![0.0f32; heads * frames * frames];
    let mut mixed = vec![0.0f32; frames * hidden];
    for h in 0..heads {
        let off = h * d;
        for t1 in 0..frames {
            let row = &mut probs[(h * frames + t1) * frames..][..frames];
            let qi = &q[t1 * hidden + off..][..d];
            let brow = &bias.data()[(h * frames + t1) * frames..][..frames];
            for (t2, (r, &b)) in row.iter_mut().zip(brow).enumerate() {
                *r = if b == f32::NEG_INFINITY {
                    f32::NEG_INFINITY
                } else {
                    let kj = &k[t2 * hidden + off..][..d];
                    qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f32>() * scale + b
                };
            }
            softmax_in_place(row);
            let out = &mut mixed[t1 * hidden + off..][..d];
            for (t2, &p) in row.iter().enumerate() {
                if p != 0.0 {
                    let vj = &v[t2 * hidden + off..][..d];
                    out.iter_mut().zip(vj).for_each(|(o, &vv)| *o += p * vv);
                }
            }
        }
    }
    let mixed = Tensor::new(vec![frames, hidden], mixed)?;
    let out = linear(&mixed, w.wo, w.bo)?;
    Ok((out, Tensor::new(vec![heads, frames, frames], probs)?))
}

pub fn attention(x: &Tensor, w: &AttentionWeights<'_>, bias: &Tensor) -> Result<Tensor> {
    attention_with_weights(x, w, bias).map(|(o, _)| o)
}

/// Token `[σ(T_t − T_{t−1}); σ(T_{t+1} − T_t); O_t; E_t]` per frame, with the
/// track padded by repeating its first and last positions.
pub fn build_tokens(track: &Track, occl: &OcclusionTrack, emb: &Tensor) -> Result<Tensor> {
    let frames = track.len();
    let [ef, dim] = *emb.shape() else {
        return Err(Error::shape("refine_step", format!("embedding must be T×D, got {:?}", emb.shape())));
    };
    if occl.len() != frames || ef != frames || frames == 0 {
        return Err(Error::shape(
            "refine_step",
            format!("lengths disagree: track {frames}, occlusion {}, embedding {ef}", occl.len()),
        ));
    }
    let width = 4 * SINUSOID_CHANNELS + 1 + dim;
    let mut out = Vec::with_capacity(frames * width);
    let p = &track.positions;
    for t in 0..frames {
        let prev = p[t.saturating_sub(1)];
        let next = p[(t + 1).min(frames - 1)];
        let back = [p[t][0] - prev[0], p[t][1] - prev[1]];
        let fwd = [next[0] - p[t][0], next[1] - p[t][1]];
        for delta in [back, fwd] {
            out.extend(sinusoidal_encode(delta[0]));
            out.extend(sinusoidal_encode(delta[1]));
        }
        out.push(occl.logits[t]);
        out.extend_from_slice(&emb.data()[t * dim..(t + 1) * dim]);
    }
    Tensor::new(vec![frames, width], out)
}

struct Block<'w> {
    norm1: (&'w Tensor, &'w Tensor),
    attn: AttentionWeights<'w>,
    norm2: (&'w Tensor, &'w Tensor),
    fc1: (&'w Tensor, &'w Tensor),
    fc2: (&'w Tensor, &'w Tensor),
}

/// Transformer refiner with borrowed weights.
pub struct Refiner<'w> {
    cfg: RefinerConfig,
    table: BiasTable,
    input: (&'w Tensor, &'w Tensor),
    blocks: Vec<Block<'w>>,
    norm_out: (&'w Tensor, &'w Tensor),
    head: (&'w Tensor, &'w Tensor),
}

impl<'w> Refiner<'w> {
    pub fn new(weights: &'w WeightsContainer, cfg: RefinerConfig) -> Result<Self> {
        cfg.check()?;
        let pair = |a: String, b: String| -> Result<_> { Ok((weights.get(&a)?, weights.get(&b)?)) };
        let input = pair("refiner.input.weight".into(), "refiner.input.bias".into())?;
        if input.0.shape() != [token_width(cfg.variant), cfg.hidden] {
            return Err(Error::WeightShape {
                name: "refiner.input.weight".into(),
                expected: vec![token_width(cfg.variant), cfg.hidden],
                got: input.0.shape().to_vec(),
            });
        }
        let blocks = (0..cfg.n_layers)
            .map(|l| {
                let p = format!("refiner.block{l}");
                Ok(Block {
                    norm1: pair(format!("{p}.norm1.gamma"), format!("{p}.norm1.beta"))?,
                    attn: AttentionWeights::load(weights, &format!("{p}.attn"))?,
                    norm2: pair(format!("{p}.norm2.gamma"), format!("{p}.norm2.beta"))?,
                    fc1: pair(format!("{p}.mlp.fc1.weight"), format!("{p}.mlp.fc1.bias"))?,
                    fc2: pair(format!("{p}.mlp.fc2.weight"), format!("{p}.mlp.fc2.bias"))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            table: BiasTable::geometric(cfg.heads),
            norm_out: pair("refiner.norm_out.gamma".into(), "refiner.norm_out.beta".into())?,
            head: pair("refiner.head.weight".into(), "refiner.head.bias".into())?,
            input,
            blocks,
            cfg,
        })
    }

    pub fn config(&self) -> &RefinerConfig {
        &self.cfg
    }

    /// Per-frame residuals `(Δx, Δy)` and `ΔO`.
    pub fn refine_step(&self, track: &Track, occl: &OcclusionTrack, emb: &Tensor) -> Result<(Vec<[f32; 2]>, Vec<f32>)> {
        let tokens = build_tokens(track, occl, emb)?;
        let frames = track.len();
        let bias = build_bias(frames, &self.cfg, &self.table);
        let mut x = linear(&tokens, self.input.0, self.input.1)?;
        for blk in &self.blocks {
            let h = layer_norm(&x, blk.norm1.0, blk.norm1.1, NORM_EPS)?;
            let a = attention(&h, &blk.attn, &bias)?;
            x.data_mut().iter_mut().zip(a.data()).for_each(|(x, a)| *x += a);
            let h = layer_norm(&x, blk.norm2.0, blk.norm2.1, NORM_EPS)?;
            let mut m = linear(&h, blk.fc1.0, blk.fc1.1)?;
            gelu_in_place(m.data_mut());
            let m = linear(&m, blk.fc2.0, blk.fc2.1)?;
            x.data_mut().iter_mut().zip(m.data()).for_each(|(x, m)| *x += m);
        }
        let x = layer_norm(&x, self.norm_out.0, self.norm_out.1, NORM_EPS)?;
        let out = linear(&x, self.head.0, self.head.1)?;
        let (dt, dobs) = out.data().chunks_exact(3).map(|r| ([r[0], r[1]], r[2])).unzip();
        Ok((dt, dobs))
    }
}

/// Final track, occlusion and every intermediate iterate (index 0 is the
/// input track).
#[derive(Clone, Debug, PartialEq)]
pub struct Refinement {
    pub track: Track,
    pub occlusion: OcclusionTrack,
    pub history: Vec<Track>,
}

/// Correlation embeddings `T×D_E` for every frame at the current track.
pub fn embed_track(
    track: &Track,
    pyr: &FeaturePyramid,
    qctx: &QueryContext,
    encoder: &CorrEncoder<'_>,
    counter: Option<&MacCounter>,
) -> Result<Tensor> {
    let rows = (0..track.len())
        .into_par_iter()
        .map(|t| {
            let [x, y] = track.positions[t];
            let vols = qctx.volumes(pyr, t, (x, y), CORR_RADIUS, counter)?;
            encoder.encode(&vols)
        })
        .collect::<Result<Vec<_>>>()?;
    let dim = encoder.embedding_width();
    Tensor::new(vec![track.len(), dim], rows.concat())
}

/// Run `cfg.iterations` learned refinement steps from the Stage I output.
pub fn iterate(
    track: Track,
    occl: OcclusionTrack,
    pyr: &FeaturePyramid,
    query: &QueryPoint,
    weights: &WeightsContainer,
    cfg: &RefinerConfig,
    counter: Option<&MacCounter>,
) -> Result<Refinement> {
    if track.len() != pyr.num_frames() || occl.len() != track.len() {
        return Err(Error::shape(
            "iterate",
            format!("track {} / occlusion {} / video {} frames", track.len(), occl.len(), pyr.num_frames()),
        ));
    }
    let refiner = Refiner::new(weights, cfg.clone())?;
    let encoder = CorrEncoder::new(weights, cfg.variant)?;
    let qctx = QueryContext::new(pyr, query, CORR_RADIUS, counter);
    let (mut track, mut occl) = (track, occl);
    let mut history = vec![track.clone()];
    for _ in 0..cfg.iterations {
        let emb = embed_track(&track, pyr, &qctx, &encoder, counter)?;
        let (dt, dobs) = refiner.refine_step(&track, &occl, &emb)?;
        for (p, d) in track.positions.iter_mut().zip(&dt) {
            p[0] += d[0];
            p[1] += d[1];
        }
        occl.logits.iter_mut().zip(&dobs).for_each(|(o, d)| *o += d);
        history.push(track.clone());
    }
    Ok(Refinement {
        track,
        occlusion: occl,
        history,
    })
}

/// Non-learned refinement step on the level-0 local volume. The query axes
/// are marginalized over the central 3×3 query offsets along the matched
/// diagonal, giving a 7×7 map over target displacements whose kernel
/// softargmax is the update. Returns the pixel displacement per frame.
pub fn argmax_refine_step(
    track: &Track,
    pyr: &FeaturePyramid,
    query: &QueryPoint,
    tau: f32,
    sigma: f32,
) -> Vec<[f32; 2]> {
    let qctx = QueryContext::new(pyr, query, CORR_RADIUS, None);
    argmax_refine_step_with(track, pyr, &qctx, tau, sigma)
}

/// [`argmax_refine_step`] with a prepared query context.
pub fn argmax_refine_step_with(
    track: &Track,
    pyr: &FeaturePyramid,
    qctx: &QueryContext,
    tau: f32,
    sigma: f32,
) -> Vec<[f32; 2]> {
    let stride = LEVEL_STRIDES[0] as f32;
    let r = CORR_RADIUS;
    (0..track.len())
        .into_par_iter()
        .map(|t| {
            let [x, y] = track.positions[t];
            let target = Neighborhood::sample(pyr.frame(0, t), (x / stride, y / stride), r, None);
            let c = Neighborhood::correlate(&target, &qctx.levels[0], 0, None)
                .expect("levels share channel counts");
            let v = c.vol.data();
            let nq = CORR_SIDE * CORR_SIDE;
            // Displacement consensus: for target offset d, average the
            // similarity of each centre query cell j with target cell j + d.
            let map: Vec<f64> = (0..nq)
                .map(|i| {
                    let (dy, dx) = ((i / CORR_SIDE) as isize - r as isize, (i % CORR_SIDE) as isize - r as isize);
                    let (mut s, mut n) = (0.0f64, 0usize);
                    for qy in r - 1..=r + 1 {
                        for qx in r - 1..=r + 1 {
                            let (ty, tx) = (qy as isize + dy, qx as isize + dx);
                            if (0..CORR_SIDE as isize).contains(&ty) && (0..CORR_SIDE as isize).contains(&tx) {
                                s += v[(ty as usize * CORR_SIDE + tx as usize) * nq + qy * CORR_SIDE + qx] as f64;
                                n += 1;
                            }
                        }
                    }
                    s / n as f64
                })
                .collect();
            let sa = kernel_softargmax_f64(&map, CORR_SIDE, CORR_SIDE, tau as f64, sigma as f64);
            [((sa.x - r as f64) as f32) * stride, ((sa.y - r as f64) as f32) * stride]
        })
        .collect()
}

/// `iterations` argmax steps; occlusion is carried through unchanged.
pub fn iterate_argmax(
    track: Track,
    occl: OcclusionTrack,
    pyr: &FeaturePyramid,
    query: &QueryPoint,
    iterations: usize,
    tau: f32,
    sigma: f32,
) -> Refinement {
    let qctx = QueryContext::new(pyr, query, CORR_RADIUS, None);
    let mut track = track;
    let mut history = vec![track.clone()];
    for _ in 0..iterations {
        let d = argmax_refine_step_with(&track, pyr, &qctx, tau, sigma);
        for (p, d) in track.positions.iter_mut().zip(&d) {
            p[0] += d[0];
            p[1] += d[1];
        }
        history.push(track.clone());
    }
    Refinement {
        track,
        occlusion: occl,
        history,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{RngSeed, SeededRng};
    use crate::weights::init_weights;

    #[test]
    fn bias_closed_form_small_case() {
        let cfg = RefinerConfig::new(Variant::Small);
        let table = BiasTable { slopes: vec![1.0; 4] };
        let b = build_bias(3, &cfg, &table);
        let ninf = f32::NEG_INFINITY;
        let left = [[0.0, ninf, ninf], [-1.0, 0.0, ninf], [-2.0, -1.0, 0.0]];
        for t1 in 0..3 {
            for t2 in 0..3 {
                assert_eq!(b.at(&[0, t1, t2]), left[t1][t2]);
                assert_eq!(b.at(&[3, t1, t2]), left[t2][t1]);
            }
        }
        let single = build_bias(1, &cfg, &BiasTable::geometric(4));
        assert!(single.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn slope_schedule() {
        let t = BiasTable::geometric(6);
        let expect = [2f32.powf(-8.0 / 3.0), 2f32.powf(-16.0 / 3.0), 2f32.powi(-8)];
        assert_eq!(&t.slopes[..3], &expect);
        assert_eq!(&t.slopes[3..], &expect);
        assert!(t.slopes.iter().all(|&s| s > 0.0));
    }

    #[test]
    fn single_frame_attention_is_value_projection() {
        let w = init_weights(Variant::Small, RngSeed(3));
        let attn = AttentionWeights::load(&w, "refiner.block0.attn").unwrap();
        let mut rng = SeededRng::new(1);
        let x = Tensor::new(vec![1, 256], rng.uniform_vec(256, -1.0, 1.0)).unwrap();
        let cfg = RefinerConfig::new(Variant::Small);
        let bias = build_bias(1, &cfg, &BiasTable::geometric(4));
        let out = attention(&x, &attn, &bias).unwrap();
        let v = linear(&x, attn.wv, attn.bv).unwrap();
        let expect = linear(&v, attn.wo, attn.bo).unwrap();
        assert!(out.max_abs_diff(&expect) < 1e-5);
    }

    #[test]
    fn uniform_tokens_spread_evenly_over_permitted_keys() {
        let w = init_weights(Variant::Small, RngSeed(3));
        let attn = AttentionWeights::load(&w, "refiner.block1.attn").unwrap();
        let t = 5;
        let x = Tensor::new(vec![t, 256], [0.3f32; 256].repeat(t)).unwrap();
        let cfg = RefinerConfig::new(Variant::Small);
        let bias = build_bias(t, &cfg, &BiasTable { slopes: vec![0.0; 4] });
        let (_, probs) = attention_with_weights(&x, &attn, &bias).unwrap();
        for h in 0..4 {
            for t1 in 0..t {
                let allowed = if h < 2 { t1 + 1 } else { t - t1 };
                for t2 in 0..t {
                    let ok = if h < 2 { t2 <= t1 } else { t2 >= t1 };
                    let p = probs.at(&[h, t1, t2]);
                    if ok {
                        assert!((p - 1.0 / allowed as f32).abs() < 1e-6);
                    } else {
                        assert_eq!(p, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn token_boundary_padding_and_width() {
        let track = Track { positions: vec![[10.0, 5.0], [12.0, 4.0], [13.5, 4.0]] };
        let occl = OcclusionTrack { logits: vec![0.1, -0.2, 0.3] };
        let emb = Tensor::zeros(&[3, 768]);
        let tok = build_tokens(&track, &occl, &emb).unwrap();
        assert_eq!(tok.shape(), &[3, 853]);
        assert_eq!(token_width(Variant::Base), 853);
        let zero = sinusoidal_encode(0.0);
        let row0 = &tok.data()[..853];
        assert_eq!(&row0[..21], &zero);
        assert_eq!(&row0[21..42], &zero);
        assert_eq!(&row0[42..63], &sinusoidal_encode(2.0));
        let last = &tok.data()[2 * 853..];
        assert_eq!(&last[42..63], &zero);
        assert_eq!(last[84], 0.3);
        let short = OcclusionTrack { logits: vec![0.0; 2] };
        assert!(build_tokens(&track, &short, &emb).is_err());
    }

    #[test]
    fn zero_head_gives_zero_update() {
        let w = init_weights(Variant::Small, RngSeed(8));
        let r = Refiner::new(&w, RefinerConfig::new(Variant::Small)).unwrap();
        let mut rng = SeededRng::new(2);
        let track = Track { positions: (0..6).map(|_| [rng.uniform(0.0, 50.0), rng.uniform(0.0, 50.0)]).collect() };
        let occl = OcclusionTrack { logits: rng.uniform_vec(6, -2.0, 2.0) };
        let emb = Tensor::new(vec![6, 768], rng.uniform_vec(6 * 768, -1.0, 1.0)).unwrap();
        let (dt, dobs) = r.refine_step(&track, &occl, &emb).unwrap();
        assert!(dt.iter().flatten().all(|&v| v == 0.0));
        assert!(dobs.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn odd_head_count_rejected() {
        let w = init_weights(Variant::Small, RngSeed(8));
        let mut cfg = RefinerConfig::new(Variant::Small);
        cfg.heads = 3;
        assert!(Refiner::new(&w, cfg).is_err());
    }
}
