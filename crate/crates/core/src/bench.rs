//! Throughput harness and analytic operation counts.
//!
//! Counts are multiply-adds per query point. Only the refinement path is
//! summed into the headline number; Stage I and the backbone are reported
//! separately because they are shared or amortized differently.

use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::FeaturePyramid;
use crate::config::{Variant, CORR_SIDE, NUM_LEVELS, REFINE_ITERATIONS, TRANSFORMER_LAYERS, MLP_RATIO};
use crate::correlation::{MacCounter, QueryPoint};
use crate::error::{Error, Result};
use crate::numerics::Padding;
use crate::pipeline::{BackboneKind, RefinerKind, Tracker, TrackerConfig};
use crate::refiner::token_width;
use crate::rng::{RngSeed, SeededRng};
use crate::synth::{synth_generate, Motion, SynthSpec};
use crate::weights::init_weights;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub variant: Variant,
    pub backbone: BackboneKind,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub n_points: Vec<usize>,
    pub iterations: usize,
    /// Each size is timed this many times; the fastest run is kept.
    pub repeats: usize,
    pub seed: RngSeed,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Base,
            backbone: BackboneKind::Learned,
            frames: 24,
            height: 256,
            width: 256,
            n_points: vec![1, 10, 100, 1000],
            iterations: REFINE_ITERATIONS,
            repeats: 1,
            seed: RngSeed(0),
        }
    }
}

/// Multiply-add counts for one query point.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacCount {
    pub local_corr: u64,
    pub encoder: u64,
    pub transformer: u64,
    /// Stage I global correlation (not part of the refinement total).
    pub global_corr: u64,
}

impl MacCount {
    pub fn refinement(&self) -> u64 {
        self.local_corr + self.encoder + self.transformer
    }

    /// FLOPs of the refinement path, two per multiply-add.
    pub fn refinement_flops(&self) -> u64 {
        2 * self.refinement()
    }
}

/// Closed form for the local correlation: `K·T·(2r+1)⁴·ΣC_l`.
pub fn local_corr_macs(frames: usize, iterations: usize, channels: &[usize]) -> u64 {
    let side4 = (CORR_SIDE as u64).pow(4);
    (iterations * frames) as u64 * side4 * channels.iter().map(|&c| c as u64).sum::<u64>()
}

/// Conv MACs of one encoder branch on a `7×7×49` input.
pub fn encoder_branch_macs(variant: Variant) -> u64 {
    let (mut extent, mut cin) = (CORR_SIDE, CORR_SIDE * CORR_SIDE);
    let mut total = 0u64;
    for blk in variant.encoder_blocks() {
        let (out, _) = Padding::Same.plan(extent, blk.kernel, blk.stride).expect("same padding always plans");
        total += (out * out * blk.kernel * blk.kernel * cin * blk.channels) as u64;
        extent = out;
        cin = blk.channels;
    }
    total
}

/// Projections, attention and MLP of one refiner pass over `frames` tokens.
/// Masked attention entries are not counted: every head sees `t+1` keys at
/// row `t`.
pub fn transformer_macs(variant: Variant, frames: usize) -> u64 {
    let (t, h) = (frames as u64, variant.hidden() as u64);
    let input = t * token_width(variant) as u64 * h;
    let proj = 4 * t * h * h;
    let attn = t * (t + 1) * h;
    let mlp = 2 * t * h * (MLP_RATIO as u64 * h);
    let head = t * h * 3;
    input + TRANSFORMER_LAYERS as u64 * (proj + attn + mlp) + head
}

pub fn analytic_macs(variant: Variant, frames: usize, iterations: usize, pyr_shape: &[(usize, usize, usize)]) -> MacCount {
    let channels: Vec<usize> = pyr_shape.iter().map(|s| s.2).collect();
    let kt = (iterations * frames) as u64;
    MacCount {
        local_corr: local_corr_macs(frames, iterations, &channels),
        encoder: kt * (NUM_LEVELS * 2) as u64 * encoder_branch_macs(variant),
        transformer: iterations as u64 * transformer_macs(variant, frames),
        global_corr: frames as u64 * pyr_shape.iter().map(|&(h, w, c)| (h * w * c) as u64).sum::<u64>(),
    }
}

/// `(height, width, channels)` of each pyramid level.
pub fn pyramid_shape(pyr: &FeaturePyramid) -> Vec<(usize, usize, usize)> {
    (0..pyr.num_levels())
        .map(|l| {
            let s = pyr.level(l).shape();
            (s[1], s[2], s[3])
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub n_points: usize,
    /// Backbone plus every point, wall clock.
    pub seconds: f64,
    pub points_per_second: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub rows: Vec<BenchRow>,
    pub backbone_seconds: f64,
    pub analytic: MacCount,
    pub gflops_per_point: f64,
    /// Counter reading for one point's local-correlation path, including
    /// the feature normalization it performs.
    pub instrumented_corr_macs: u64,
    pub corr_rel_err: f64,
}

impl BenchReport {
    /// Throughput at `n` points relative to throughput at 1 point.
    pub fn speedup(&self, n: usize) -> Option<f64> {
        let at = |k: usize| self.rows.iter().find(|r| r.n_points == k).map(|r| r.points_per_second);
        Some(at(n)? / at(1)?)
    }
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = &self.config;
        writeln!(
            f,
            "variant {} ({}), T={}, {}x{}, K={}",
            c.variant.short_name(),
            c.backbone,
            c.frames,
            c.height,
            c.width,
            c.iterations
        )?;
        writeln!(f, "backbone        {:>10.3} s", self.backbone_seconds)?;
        writeln!(f, "{:>8} {:>12} {:>14}", "points", "seconds", "points/sec")?;
        for r in &self.rows {
            writeln!(f, "{:>8} {:>12.3} {:>14.2}", r.n_points, r.seconds, r.points_per_second)?;
        }
        let a = &self.analytic;
        writeln!(f, "MACs per point: local corr {}, encoder {}, transformer {}", a.local_corr, a.encoder, a.transformer)?;
        writeln!(f, "refinement GFLOPs per point {:.4}", self.gflops_per_point)?;
        writeln!(f, "stage I global corr MACs per point {}", a.global_corr)?;
        write!(
            f,
            "local corr counter {} vs closed form {} (rel err {:.3}%)",
            self.instrumented_corr_macs,
            a.local_corr,
            100.0 * self.corr_rel_err
        )
    }
}

fn random_queries(rng: &mut SeededRng, n: usize, cfg: &BenchConfig) -> Vec<QueryPoint> {
    (0..n)
        .map(|_| {
            QueryPoint::new(
                rng.uniform(0.0, (cfg.width - 1) as f32),
                rng.uniform(0.0, (cfg.height - 1) as f32),
                rng.index(cfg.frames),
            )
        })
        .collect()
}

/// Time the full pipeline (backbone included) at each point count.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.n_points.is_empty() || cfg.n_points.contains(&0) || cfg.repeats == 0 {
        return Err(Error::InvalidArgument("point counts and repeats must be positive".into()));
    }
    let data = synth_generate(&SynthSpec {
        seed: cfg.seed,
        frames: cfg.frames,
        height: cfg.height,
        width: cfg.width,
        motion: Motion::Translate,
        speed: 1.0,
        n_queries: 1,
    })?;
    let weights = init_weights(cfg.variant, cfg.seed);
    let tracker = Tracker::new(
        &weights,
        TrackerConfig {
            variant: cfg.variant,
            backbone: cfg.backbone,
            refiner: RefinerKind::Learned,
            iterations: cfg.iterations,
            ..TrackerConfig::default()
        },
    )?;

    let start = Instant::now();
    let pyr = tracker.pyramid(&data.video)?;
    let backbone_seconds = start.elapsed().as_secs_f64();

    let mut rng = SeededRng::derive(cfg.seed, "bench.queries");
    let mut rows = Vec::with_capacity(cfg.n_points.len());
    for &n in &cfg.n_points {
        let queries = random_queries(&mut rng, n, cfg);
        let mut best = f64::INFINITY;
        for _ in 0..cfg.repeats {
            let start = Instant::now();
            tracker.run(&data.video, &queries)?;
            best = best.min(start.elapsed().as_secs_f64());
        }
        rows.push(BenchRow {
            n_points: n,
            seconds: best,
            points_per_second: n as f64 / best,
        });
    }

    let analytic = analytic_macs(cfg.variant, cfg.frames, cfg.iterations, &pyramid_shape(&pyr));
    let counter = MacCounter::new();
    tracker.track_point(&pyr, &data.queries[0], Some(&counter))?;
    let instrumented = counter.get();
    let corr_rel_err = (instrumented as f64 - analytic.local_corr as f64).abs() / analytic.local_corr as f64;
    Ok(BenchReport {
        config: cfg.clone(),
        rows,
        backbone_seconds,
        analytic,
        gflops_per_point: analytic.refinement_flops() as f64 / 1e9,
        instrumented_corr_macs: instrumented,
        corr_rel_err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn base_local_corr_closed_form() {
        // 4 · 24 · 2401 · (64 + 128 + 256)
        assert_eq!(local_corr_macs(24, 4, &[64, 128, 256]), 103_262_208);
    }

    #[test]
    fn encoder_counts_follow_block_shapes() {
        // Small: 7 → 2 (k5 s4), 2 → 1 (k2 s2).
        assert_eq!(encoder_branch_macs(Variant::Small), 4 * 25 * 49 * 64 + 4 * 64 * 128);
        // Base: 7 → 4 → 2 → 1.
        assert_eq!(
            encoder_branch_macs(Variant::Base),
            16 * 9 * 49 * 64 + 4 * 9 * 64 * 128 + 4 * 128 * 128
        );
    }

    #[test]
    fn counter_tracks_closed_form() {
        let cfg = BenchConfig {
            variant: Variant::Small,
            frames: 3,
            height: 32,
            width: 32,
            n_points: vec![1],
            iterations: 2,
            ..BenchConfig::default()
        };
        let r = run_bench(&cfg).unwrap();
        assert!(r.corr_rel_err < 0.05, "{}", r.corr_rel_err);
        assert!(r.instrumented_corr_macs > r.analytic.local_corr);
        assert!(r.gflops_per_point > 0.0);
        assert_eq!(r.rows.len(), 1);
    }
}
