//! Seeded synthetic videos with exact ground-truth tracks.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::Video;
use crate::config::LEVEL_STRIDES;
use crate::correlation::QueryPoint;
use crate::error::{Error, Result};
use crate::metrics::{sample_queries, GroundTruthTrack, QueryMode};
use crate::numerics::Tensor;
use crate::rng::{RngSeed, SeededRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Motion {
    /// Whole frame slides right at `speed` px/frame.
    Translate,
    /// A textured square follows a Lissajous path over a static background.
    Sine,
    /// Translating background plus an opaque vertical bar sweeping across.
    Occluder,
}

impl FromStr for Motion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "translate" => Ok(Motion::Translate),
            "sine" => Ok(Motion::Sine),
            "occluder" => Ok(Motion::Occluder),
            _ => Err(Error::InvalidArgument(format!(
                "unknown motion `{s}` (translate|sine|occluder)"
            ))),
        }
    }
}

impl fmt::Display for Motion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Motion::Translate => "translate",
            Motion::Sine => "sine",
            Motion::Occluder => "occluder",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: RngSeed,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub motion: Motion,
    /// Pixels per frame.
    pub speed: f32,
    pub n_queries: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: RngSeed(0),
            frames: 24,
            height: 256,
            width: 256,
            motion: Motion::Translate,
            speed: 2.0,
            n_queries: 16,
        }
    }
}

/// Keep sampled points this far from the border so that correlation
/// neighbourhoods rarely clamp.
const MARGIN: f32 = 16.0;
/// Gaussian blur std of the texture noise, pixels.
const TEXTURE_BLUR: f32 = 0.8;
/// Softmax sharpness applied to the unit-variance noise fields.
const TEXTURE_SHARPNESS: f32 = 3.0;

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.frames == 0 || self.n_queries == 0 {
            return bad("frames and n_queries must be positive".into());
        }
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(8) || !self.width.is_multiple_of(8) {
            return bad(format!("extents {}×{} must be positive multiples of 8", self.height, self.width));
        }
        if !(self.speed.is_finite() && self.speed >= 0.0) {
            return bad(format!("speed {} must be finite and non-negative", self.speed));
        }
        let limit = self.height.min(self.width) as f32 / self.frames as f32;
        if self.motion != Motion::Sine && self.speed >= limit {
            return bad(format!(
                "speed {} px/frame would leave the frame (limit {limit:.3})",
                self.speed
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SynthData {
    pub video: Video,
    pub tracks: Vec<GroundTruthTrack>,
    /// One query per track at its first visible frame.
    pub queries: Vec<QueryPoint>,
}

pub fn synth_generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let (frames, tracks) = match spec.motion {
        Motion::Translate => translate(spec, false),
        Motion::Occluder => translate(spec, true),
        Motion::Sine => sine(spec),
    };
    let video = Video::new(Tensor::new(vec![spec.frames, spec.height, spec.width, 3], frames)?)?;
    let queries = tracks
        .iter()
        .map(|g| sample_queries(g, QueryMode::First).into_iter().next())
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::InvalidArgument("a synthetic track is never visible".into()))?;
    Ok(SynthData { video, tracks, queries })
}

/// Smooth colour noise, `h×w×3`. Each pixel is a point on the RGB
/// simplex (a softmax over three blurred noise fields), so brightness is
/// constant and only the colour mix varies. Cosine similarity ignores
/// brightness, and keeping every pixel off the grey axis gives unrelated
/// patches low similarity.
pub fn texture(rng: &mut SeededRng, h: usize, w: usize) -> Vec<f32> {
    let radius = (3.0 * TEXTURE_BLUR).ceil() as isize;
    let kernel: Vec<f32> = (-radius..=radius)
        .map(|d| (-(d * d) as f32 / (2.0 * TEXTURE_BLUR * TEXTURE_BLUR)).exp())
        .collect();
    let ksum: f32 = kernel.iter().sum();
    let blur = |src: &[f32], horizontal: bool| -> Vec<f32> {
        let mut dst = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (k, d) in kernel.iter().zip(-radius..=radius) {
                    let (sx, sy) = if horizontal {
                        ((x as isize + d).clamp(0, w as isize - 1) as usize, y)
                    } else {
                        (x, (y as isize + d).clamp(0, h as isize - 1) as usize)
                    };
                    s += k * src[sy * w + sx];
                }
                dst[y * w + x] = s / ksum;
            }
        }
        dst
    };
    let mut out = vec![0.0; h * w * 3];
    for c in 0..3 {
        let noise: Vec<f32> = (0..h * w).map(|_| rng.normal()).collect();
        let smooth = blur(&blur(&noise, true), false);
        let mean = smooth.iter().sum::<f32>() / smooth.len() as f32;
        let var = smooth.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / smooth.len() as f32;
        let gain = TEXTURE_SHARPNESS / var.sqrt().max(1e-12);
        for (i, v) in smooth.iter().enumerate() {
            out[i * 3 + c] = gain * (v - mean);
        }
    }
    for px in out.chunks_exact_mut(3) {
        let m = px.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        px.iter_mut().for_each(|v| *v = (*v - m).exp());
        let s: f32 = px.iter().sum();
        px.iter_mut().for_each(|v| *v /= s);
    }
    out
}

/// Bilinear lookup into an `h×w×3` image, clamped.
fn sample_rgb(img: &[f32], h: usize, w: usize, x: f32, y: f32) -> [f32; 3] {
    let x = x.clamp(0.0, (w - 1) as f32);
    let y = y.clamp(0.0, (h - 1) as f32);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f32, y - y0 as f32);
    let mut px = [0.0; 3];
    for (c, p) in px.iter_mut().enumerate() {
        let at = |yy: usize, xx: usize| img[(yy * w + xx) * 3 + c];
        let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
        let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
        *p = top * (1.0 - fy) + bot * fy;
    }
    px
}

fn translate(spec: &SynthSpec, occluder: bool) -> (Vec<f32>, Vec<GroundTruthTrack>) {
    let (t_n, h, w) = (spec.frames, spec.height, spec.width);
    let travel = spec.speed * (t_n - 1) as f32;
    let extra = travel.ceil() as usize + 2;
    let tw = w + extra;
    let mut rng = SeededRng::derive(spec.seed, "synth.texture");
    let tex = texture(&mut rng, h, tw);
    let mut frames = vec![0.0; t_n * h * w * 3];
    for t in 0..t_n {
        // Content drifts right: frame pixel x shows texture column x + travel − speed·t.
        let shift = travel - spec.speed * t as f32;
        let base = t * h * w * 3;
        for y in 0..h {
            for x in 0..w {
                let px = sample_rgb(&tex, h, tw, x as f32 + shift, y as f32);
                frames[base + (y * w + x) * 3..][..3].copy_from_slice(&px);
            }
        }
    }
    let bar = occluder.then(|| Bar::new(w, t_n));
    if let Some(bar) = &bar {
        for t in 0..t_n {
            let (lo, hi) = bar.span(t);
            for y in 0..h {
                for x in 0..w {
                    if (lo..hi).contains(&(x as f32)) {
                        frames[t * h * w * 3 + (y * w + x) * 3..][..3].fill(Bar::GREY);
                    }
                }
            }
        }
    }
    let mut rng = SeededRng::derive(spec.seed, "synth.points");
    let margin = margin_for(w as f32 - travel, h as f32);
    let tracks = (0..spec.n_queries)
        .map(|_| {
            let x0 = rng.uniform(margin.0, w as f32 - travel - margin.0);
            let y0 = rng.uniform(margin.1, h as f32 - margin.1);
            let (x0, y0) = (snap(x0), snap(y0));
            let positions: Vec<[f32; 2]> = (0..t_n).map(|t| [x0 + spec.speed * t as f32, y0]).collect();
            let visible = positions
                .iter()
                .enumerate()
                .map(|(t, p)| bar.as_ref().is_none_or(|b| !b.covers(t, p[0])))
                .collect();
            GroundTruthTrack { positions, visible }
        })
        .collect();
    (frames, tracks)
}

/// Nearest level-0 lattice coordinate. Patch-identity features are exact
/// only at cell centres, so starting tracks there makes the ground-truth
/// match exact under whole-cell motion.
fn snap(v: f32) -> f32 {
    let s = LEVEL_STRIDES[0] as f32;
    s * (v / s).round()
}

/// Margin that still leaves room for a non-empty sampling interval.
fn margin_for(span_x: f32, span_y: f32) -> (f32, f32) {
    let m = |span: f32| MARGIN.min((span - 1.0).max(0.0) * 0.25);
    (m(span_x), m(span_y))
}

/// Full-height grey bar sweeping left to right across the video.
struct Bar {
    width: f32,
    start: f32,
    step: f32,
}

impl Bar {
    const GREY: f32 = 0.5;

    fn new(frame_width: usize, frames: usize) -> Self {
        let width = (frame_width / 8).max(8) as f32;
        let travel = frame_width as f32 + width;
        if frames <= 1 {
            return Self { width, start: (frame_width as f32 - width) / 2.0, step: 0.0 };
        }
        Self { width, start: -width, step: travel / (frames - 1) as f32 }
    }

    fn span(&self, t: usize) -> (f32, f32) {
        let lo = self.start + self.step * t as f32;
        (lo, lo + self.width)
    }

    /// The bar hides every pixel column whose centre is inside its span;
    /// a track point is hidden when its nearest column is.
    fn covers(&self, t: usize, x: f32) -> bool {
        let (lo, hi) = self.span(t);
        (lo..hi).contains(&x.round())
    }
}

fn sine(spec: &SynthSpec) -> (Vec<f32>, Vec<GroundTruthTrack>) {
    let (t_n, h, w) = (spec.frames, spec.height, spec.width);
    let mut rng = SeededRng::derive(spec.seed, "synth.texture");
    let background = texture(&mut rng, h, w);
    let side = ((h.min(w) / 4) & !1).max(8);
    let sprite = texture(&mut rng, side, side);
    // Sprite centre follows (A sin ωt, A sin(ωt + π/2)) around the frame
    // centre; peak speed A·ω = speed, clipped so the sprite stays inside.
    let period = t_n.max(8) as f32;
    let omega = std::f32::consts::TAU / period;
    let room_x = (w as f32 - side as f32) / 2.0 - 1.0;
    let room_y = (h as f32 - side as f32) / 2.0 - 1.0;
    let amp = (spec.speed / omega).min(room_x.min(room_y).max(0.0));
    let centre = |t: usize| {
        let a = omega * t as f32;
        [w as f32 / 2.0 + amp * a.sin(), h as f32 / 2.0 + amp * a.cos()]
    };
    let half = side as f32 / 2.0;
    let mut frames = vec![0.0; t_n * h * w * 3];
    for t in 0..t_n {
        let [cx, cy] = centre(t);
        let base = t * h * w * 3;
        for y in 0..h {
            for x in 0..w {
                let (u, v) = (x as f32 - (cx - half), y as f32 - (cy - half));
                let inside = (0.0..=(side - 1) as f32).contains(&u) && (0.0..=(side - 1) as f32).contains(&v);
                let px = if inside {
                    sample_rgb(&sprite, side, side, u, v)
                } else {
                    let i = (y * w + x) * 3;
                    [background[i], background[i + 1], background[i + 2]]
                };
                frames[base + (y * w + x) * 3..][..3].copy_from_slice(&px);
            }
        }
    }
    let mut rng = SeededRng::derive(spec.seed, "synth.points");
    let inset = 2.0f32.min(half - 1.0);
    let tracks = (0..spec.n_queries)
        .map(|_| {
            let u = rng.uniform(inset, side as f32 - 1.0 - inset);
            let v = rng.uniform(inset, side as f32 - 1.0 - inset);
            let positions = (0..t_n)
                .map(|t| {
                    let [cx, cy] = centre(t);
                    [cx - half + u, cy - half + v]
                })
                .collect();
            GroundTruthTrack { positions, visible: vec![true; t_n] }
        })
        .collect();
    (frames, tracks)
}
