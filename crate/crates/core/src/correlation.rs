//! Global (Stage I) and local all-pair 4D (Stage II) correlation.
//!
//! Positions are `(x, y)` in input pixels; level `l` grid coordinates are
//! pixels divided by the level stride.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::backbone::FeaturePyramid;
use crate::config::NUM_LEVELS;
use crate::error::{Error, Result};
use crate::numerics::{MapView, Tensor};
use crate::oracle;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryPoint {
    pub x: f32,
    pub y: f32,
    /// Frame index of the query.
    pub t: usize,
}

impl QueryPoint {
    pub fn new(x: f32, y: f32, t: usize) -> Self {
        Self { x, y, t }
    }
}

/// Per-frame multi-level cosine maps, `T×H^0×W^0×L`.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalCorr {
    pub maps: Tensor,
}

impl GlobalCorr {
    pub fn num_frames(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn frame(&self, t: usize) -> MapView<'_> {
        self.maps.frame(t)
    }
}

/// `h_p×w_p×h_q×w_q` local correlation: target neighbourhood first.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalCorr4D {
    pub vol: Tensor,
    /// Target-side centre, level grid units.
    pub center_p: (f32, f32),
    /// Query-side centre, level grid units.
    pub center_q: (f32, f32),
    pub level: usize,
}

/// Multiply-add tally of the local-correlation path.
#[derive(Debug, Default)]
pub struct MacCounter(AtomicU64);

impl MacCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&self, n: u64) {
        self.0.fetch_add(n, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}

pub fn global_correlation(pyr: &FeaturePyramid, q: &QueryPoint) -> Result<GlobalCorr> {
    let frames = pyr.num_frames();
    let base = pyr.frame(0, 0);
    let (h0, w0) = (base.height, base.width);
    let (px_h, px_w) = ((h0 * pyr.stride(0)) as f32, (w0 * pyr.stride(0)) as f32);
    if q.t >= frames {
        return Err(Error::InvalidArgument(format!("query frame {} outside 0..{frames}", q.t)));
    }
    if !(0.0..=px_w - 1.0).contains(&q.x) || !(0.0..=px_h - 1.0).contains(&q.y) {
        return Err(Error::InvalidArgument(format!(
            "query ({}, {}) outside the {px_w}×{px_h} frame",
            q.x, q.y
        )));
    }

    let levels = pyr.num_levels();
    let mut out = vec![0.0f32; frames * h0 * w0 * levels];
    for l in 0..levels {
        let s = pyr.stride(l) as f32;
        let qmap = pyr.frame(l, q.t);
        let mut qfeat = vec![0.0f32; qmap.channels];
        qmap.sample_into(q.x / s, q.y / s, &mut qfeat);
        let qnorm = qfeat.iter().map(|v| v * v).sum::<f32>().sqrt();
        let ratio = pyr.stride(0) as f32 / s;
        for t in 0..frames {
            let map = pyr.frame(l, t);
            let cos: Vec<f32> = map
                .data
                .chunks_exact(map.channels)
                .map(|cell| {
                    let (mut dot, mut nn) = (0.0f32, 0.0f32);
                    for (&a, &b) in cell.iter().zip(&qfeat) {
                        dot += a * b;
                        nn += a * a;
                    }
                    dot / (nn.sqrt() * qnorm).max(crate::numerics::COSINE_FLOOR)
                })
                .collect();
            let cos = MapView::new(map.height, map.width, 1, &cos);
            let dst = &mut out[t * h0 * w0 * levels..][..h0 * w0 * levels];
            let mut v = [0.0f32];
            for i in 0..h0 {
                for j in 0..w0 {
                    cos.sample_into(j as f32 * ratio, i as f32 * ratio, &mut v);
                    dst[(i * w0 + j) * levels + l] = v[0];
                }
            }
        }
    }
    Ok(GlobalCorr {
        maps: Tensor::new(vec![frames, h0, w0, levels], out)?,
    })
}

/// Unit-normalized features sampled on the `(2r+1)²` integer offset grid
/// around a fractional centre.
#[derive(Clone, Debug)]
pub struct Neighborhood {
    pub center: (f32, f32),
    pub radius: usize,
    channels: usize,
    feats: Vec<f32>,
}

impl Neighborhood {
    pub fn sample(map: MapView<'_>, center: (f32, f32), radius: usize, counter: Option<&MacCounter>) -> Self {
        let side = 2 * radius + 1;
        let c = map.channels;
        let mut feats = vec![0.0f32; side * side * c];
        let r = radius as f32;
        for (k, f) in feats.chunks_exact_mut(c).enumerate() {
            let (dy, dx) = ((k / side) as f32 - r, (k % side) as f32 - r);
            map.sample_into(center.0 + dx, center.1 + dy, f);
            let n = f.iter().map(|v| v * v).sum::<f32>().sqrt();
            let inv = if n > 0.0 { 1.0 / n } else { 0.0 };
            f.iter_mut().for_each(|v| *v *= inv);
        }
        if let Some(ctr) = counter {
            ctr.add((side * side * c) as u64);
        }
        Self {
            center,
            radius,
            channels: c,
            feats,
        }
    }

    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    /// All-pair cosine volume `target × query`.
    pub fn correlate(target: &Self, query: &Self, level: usize, counter: Option<&MacCounter>) -> Result<LocalCorr4D> {
        if target.channels != query.channels {
            return Err(Error::shape(
                "local_corr_4d",
                format!("{} vs {} feature channels", target.channels, query.channels),
            ));
        }
        let c = target.channels;
        let (sp, sq) = (target.side(), query.side());
        let mut vol = Vec::with_capacity(sp * sp * sq * sq);
        for a in target.feats.chunks_exact(c) {
            for b in query.feats.chunks_exact(c) {
                vol.push(a.iter().zip(b).map(|(x, y)| x * y).sum::<f32>());
            }
        }
        if let Some(ctr) = counter {
            ctr.add((sp * sp * sq * sq * c) as u64);
        }
        Ok(LocalCorr4D {
            vol: Tensor::new(vec![sp, sp, sq, sq], vol)?,
            center_p: target.center,
            center_q: query.center,
            level,
        })
    }
}

/// Local 4D correlation between `feat_t` around `p` and `feat_tq` around `q`
/// (both level grid units).
pub fn local_corr_4d(
    feat_t: MapView<'_>,
    feat_tq: MapView<'_>,
    p: (f32, f32),
    q: (f32, f32),
    r_p: usize,
    r_q: usize,
) -> Result<LocalCorr4D> {
    let target = Neighborhood::sample(feat_t, p, r_p, None);
    let query = Neighborhood::sample(feat_tq, q, r_q, None);
    Neighborhood::correlate(&target, &query, 0, None)
}

/// Quadruple-loop reference for [`local_corr_4d`].
pub fn local_corr_4d_oracle(
    feat_t: &Tensor,
    feat_tq: &Tensor,
    p: (f32, f32),
    q: (f32, f32),
    r_p: usize,
    r_q: usize,
) -> LocalCorr4D {
    let (sp, sq) = (2 * r_p + 1, 2 * r_q + 1);
    let mut vol = Tensor::zeros(&[sp, sp, sq, sq]);
    for py in 0..sp {
        for px in 0..sp {
            for qy in 0..sq {
                for qx in 0..sq {
                    let a = oracle::bilinear_naive(
                        feat_t,
                        p.0 + px as f32 - r_p as f32,
                        p.1 + py as f32 - r_p as f32,
                    );
                    let b = oracle::bilinear_naive(
                        feat_tq,
                        q.0 + qx as f32 - r_q as f32,
                        q.1 + qy as f32 - r_q as f32,
                    );
                    vol.set(&[py, px, qy, qx], oracle::cosine_naive(&a, &b));
                }
            }
        }
    }
    LocalCorr4D {
        vol,
        center_p: p,
        center_q: q,
        level: 0,
    }
}

/// Swap target and query axes: `out[a,b,c,d] = in[c,d,a,b]`.
pub fn transpose_corr(c: &LocalCorr4D) -> LocalCorr4D {
    let s = c.vol.shape();
    let (sp, sq) = (s[0], s[2]);
    let src = c.vol.data();
    let mut out = vec![0.0f32; src.len()];
    let (np, nq) = (sp * sp, sq * sq);
    for i in 0..np {
        for j in 0..nq {
            out[j * np + i] = src[i * nq + j];
        }
    }
    LocalCorr4D {
        vol: Tensor::new(vec![sq, sq, sp, sp], out).expect("same element count"),
        center_p: c.center_q,
        center_q: c.center_p,
        level: c.level,
    }
}

/// Query-side neighbourhoods of one query point at every level. Fixed for
/// the whole refinement, so they are sampled once.
#[derive(Clone, Debug)]
pub struct QueryContext {
    pub levels: Vec<Neighborhood>,
}

impl QueryContext {
    pub fn new(pyr: &FeaturePyramid, q: &QueryPoint, radius: usize, counter: Option<&MacCounter>) -> Self {
        let levels = (0..pyr.num_levels())
            .map(|l| {
                let s = pyr.stride(l) as f32;
                Neighborhood::sample(pyr.frame(l, q.t), (q.x / s, q.y / s), radius, counter)
            })
            .collect();
        Self { levels }
    }

    /// One local volume per level for frame `t` with the target centred at
    /// pixel position `pos`.
    pub fn volumes(
        &self,
        pyr: &FeaturePyramid,
        t: usize,
        pos: (f32, f32),
        radius: usize,
        counter: Option<&MacCounter>,
    ) -> Result<Vec<LocalCorr4D>> {
        debug_assert_eq!(self.levels.len(), NUM_LEVELS);
        (0..pyr.num_levels())
            .map(|l| {
                let s = pyr.stride(l) as f32;
                let target = Neighborhood::sample(pyr.frame(l, t), (pos.0 / s, pos.1 / s), radius, counter);
                Neighborhood::correlate(&target, &self.levels[l], l, counter)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{patch_identity_pyramid, Video};
    use crate::rng::SeededRng;

    fn random_map(h: usize, w: usize, c: usize, rng: &mut SeededRng) -> Tensor {
        Tensor::new(vec![h, w, c], rng.uniform_vec(h * w * c, -1.0, 1.0)).unwrap()
    }

    #[test]
    fn identical_regions_peak_on_diagonal() {
        let mut rng = SeededRng::new(2);
        let f = random_map(16, 16, 8, &mut rng);
        let c = local_corr_4d(f.map_view().unwrap(), f.map_view().unwrap(), (7.0, 8.0), (7.0, 8.0), 3, 3).unwrap();
        assert_eq!(c.vol.shape(), &[7, 7, 7, 7]);
        let max = c.vol.data().iter().copied().fold(f32::MIN, f32::max);
        for y in 0..7 {
            for x in 0..7 {
                let d = c.vol.at(&[y, x, y, x]);
                assert!((d - 1.0).abs() < 1e-5);
                assert!(d >= max - 1e-6);
            }
        }
        let t = transpose_corr(&c);
        assert!(t.vol.max_abs_diff(&c.vol) < 1e-6);
    }

    #[test]
    fn degenerate_radius_is_one_cosine() {
        let mut rng = SeededRng::new(3);
        let a = random_map(9, 9, 5, &mut rng);
        let b = random_map(9, 9, 5, &mut rng);
        let c = local_corr_4d(a.map_view().unwrap(), b.map_view().unwrap(), (2.5, 3.25), (6.0, 1.5), 0, 0).unwrap();
        assert_eq!(c.vol.shape(), &[1, 1, 1, 1]);
        let fa = oracle::bilinear_naive(&a, 2.5, 3.25);
        let fb = oracle::bilinear_naive(&b, 6.0, 1.5);
        assert!((c.vol.data()[0] - oracle::cosine_naive(&fa, &fb)).abs() < 1e-6);
        let o = local_corr_4d_oracle(&a, &b, (2.5, 3.25), (6.0, 1.5), 0, 0);
        assert!((o.vol.data()[0] - c.vol.data()[0]).abs() < 1e-6);
    }

    #[test]
    fn transpose_indexing_and_involution() {
        let mut rng = SeededRng::new(4);
        let vol = Tensor::new(vec![3, 3, 5, 5], rng.uniform_vec(225, -1.0, 1.0)).unwrap();
        let c = LocalCorr4D { vol, center_p: (1.0, 2.0), center_q: (3.0, 4.0), level: 1 };
        let t = transpose_corr(&c);
        assert_eq!(t.vol.shape(), &[5, 5, 3, 3]);
        assert_eq!(t.center_p, (3.0, 4.0));
        for a in 0..5 {
            for b in 0..5 {
                for cc in 0..3 {
                    for d in 0..3 {
                        assert_eq!(t.vol.at(&[a, b, cc, d]), c.vol.at(&[cc, d, a, b]));
                    }
                }
            }
        }
        assert_eq!(transpose_corr(&t), c);
    }

    #[test]
    fn shift_equivariance() {
        let mut rng = SeededRng::new(5);
        let (h, w, c) = (24, 24, 6);
        let a = random_map(h, w, c, &mut rng);
        let b = random_map(h, w, c, &mut rng);
        let shift = |m: &Tensor, dx: usize, dy: usize| {
            let mut out = Tensor::zeros(m.shape());
            for y in dy..h {
                for x in dx..w {
                    for k in 0..c {
                        out.set(&[y, x, k], m.at(&[y - dy, x - dx, k]));
                    }
                }
            }
            out
        };
        let (p, q) = ((8.3, 9.6), (10.5, 7.25));
        let base = local_corr_4d(a.map_view().unwrap(), b.map_view().unwrap(), p, q, 3, 3).unwrap();
        let (sa, sb) = (shift(&a, 3, 2), shift(&b, 3, 2));
        let moved = local_corr_4d(
            sa.map_view().unwrap(),
            sb.map_view().unwrap(),
            (p.0 + 3.0, p.1 + 2.0),
            (q.0 + 3.0, q.1 + 2.0),
            3,
            3,
        )
        .unwrap();
        assert!(base.vol.max_abs_diff(&moved.vol) < 1e-5);
    }

    #[test]
    fn global_corr_self_match_and_orthogonal() {
        let mut rng = SeededRng::new(8);
        let (h, w) = (32, 32);
        let v = Video::new(Tensor::new(vec![2, h, w, 3], rng.uniform_vec(2 * h * w * 3, 0.0, 1.0)).unwrap()).unwrap();
        let pyr = patch_identity_pyramid(&v);
        let q = QueryPoint::new(14.0, 10.0, 1);
        let gc = global_correlation(&pyr, &q).unwrap();
        assert_eq!(gc.maps.shape(), &[2, 16, 16, 3]);
        let f = gc.frame(1);
        let (mut best, mut arg) = (f32::MIN, (0, 0));
        for i in 0..16 {
            for j in 0..16 {
                let v = f.cell(i, j)[0];
                if v > best {
                    best = v;
                    arg = (i, j);
                }
            }
        }
        assert_eq!(arg, (5, 7));
        assert!((best - 1.0).abs() < 1e-6);
        assert!(gc.maps.data().iter().all(|v| (-1.0 - 1e-5..=1.0 + 1e-5).contains(v)));

        // Features living in two disjoint channel sets are orthogonal.
        let mut frames = vec![0.0f32; 2 * h * w * 3];
        for (k, px) in frames.chunks_exact_mut(3).enumerate() {
            if k < h * w {
                px[0] = 1.0;
            } else {
                px[1] = 1.0;
            }
        }
        let v = Video::new(Tensor::new(vec![2, h, w, 3], frames).unwrap()).unwrap();
        let gc = global_correlation(&patch_identity_pyramid(&v), &QueryPoint::new(3.0, 3.0, 0)).unwrap();
        assert!(gc.frame(1).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn global_corr_rejects_outside_query() {
        let v = Video::new(Tensor::full(&[1, 16, 16, 3], 0.5)).unwrap();
        let pyr = patch_identity_pyramid(&v);
        assert!(global_correlation(&pyr, &QueryPoint::new(16.0, 2.0, 0)).is_err());
        assert!(global_correlation(&pyr, &QueryPoint::new(2.0, 2.0, 1)).is_err());
    }

    #[test]
    fn global_corr_matches_loop_oracle() {
        let mut rng = SeededRng::new(21);
        let (h, w) = (32, 40);
        let v = Video::new(Tensor::new(vec![2, h, w, 3], rng.uniform_vec(2 * h * w * 3, 0.0, 1.0)).unwrap()).unwrap();
        let pyr = patch_identity_pyramid(&v);
        let q = QueryPoint::new(17.3, 9.8, 0);
        let gc = global_correlation(&pyr, &q).unwrap();
        for l in 0..3 {
            let s = pyr.stride(l) as f32;
            let qf = oracle::bilinear_naive(&pyr.frame(l, 0).to_tensor(), q.x / s, q.y / s);
            let target = pyr.frame(l, 1).to_tensor();
            let (lh, lw) = (target.shape()[0], target.shape()[1]);
            let mut cos = Tensor::zeros(&[lh, lw, 1]);
            for i in 0..lh {
                for j in 0..lw {
                    let cell: Vec<f32> = (0..target.shape()[2]).map(|k| target.at(&[i, j, k])).collect();
                    cos.set(&[i, j, 0], oracle::cosine_naive(&cell, &qf));
                }
            }
            for i in 0..16 {
                for j in 0..20 {
                    let expect = oracle::bilinear_naive(&cos, j as f32 * 2.0 / s, i as f32 * 2.0 / s)[0];
                    assert!((gc.maps.at(&[1, i, j, l]) - expect).abs() < 1e-5);
                }
            }
        }
    }
}
