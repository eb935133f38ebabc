//! End-to-end driver: video and queries in, tracks out.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{extract_pyramid, patch_identity_pyramid, FeaturePyramid, Video};
use crate::config::{Variant, REFINE_ITERATIONS, SOFTARGMAX_SIGMA, SOFTARGMAX_TAU};
use crate::corr_encoder::CorrEncoder;
use crate::correlation::{global_correlation, MacCounter, QueryPoint};
use crate::error::{Error, Result};
use crate::io::{self, GroundTruthFile, PointPrediction, QueryEntry, QueryFile, TrackFile};
use crate::metrics::{evaluate, sample_queries, FrameSize, MetricsReport, QueryMode, Sample};
use crate::refiner::{iterate, iterate_argmax, Refiner, RefinerConfig};
use crate::rng::RngSeed;
use crate::synth::SynthData;
use crate::track_init::{init_track, OcclusionTrack, Track};
use crate::weights::{init_weights, set_identity_fusion, WeightsContainer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    Learned,
    PatchIdentity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RefinerKind {
    Learned,
    Argmax,
}

macro_rules! str_enum {
    ($ty:ident { $($variant:ident => $name:literal),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($ty::$variant),)+
                    _ => Err(Error::InvalidArgument(format!(
                        concat!("unknown ", stringify!($ty), " `{}` (expected one of: ", $($name, " ",)+ ")"),
                        s
                    ))),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$variant => $name,)+ })
            }
        }
    };
}

str_enum!(BackboneKind { Learned => "learned", PatchIdentity => "patch-identity" });
str_enum!(RefinerKind { Learned => "learned", Argmax => "argmax" });

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackerConfig {
    pub variant: Variant,
    pub backbone: BackboneKind,
    pub refiner: RefinerKind,
    pub iterations: usize,
    pub tau: f32,
    pub sigma: f32,
    pub keep_history: bool,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Base,
            backbone: BackboneKind::Learned,
            refiner: RefinerKind::Learned,
            iterations: REFINE_ITERATIONS,
            tau: SOFTARGMAX_TAU,
            sigma: SOFTARGMAX_SIGMA,
            keep_history: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointResult {
    pub query: QueryPoint,
    pub track: Track,
    pub occlusion: OcclusionTrack,
    /// Stage I track first, then one entry per refinement iteration.
    pub history: Vec<Track>,
}

impl PointResult {
    pub fn stage1(&self) -> &Track {
        &self.history[0]
    }
}

pub struct Tracker<'w> {
    weights: &'w WeightsContainer,
    cfg: TrackerConfig,
}

impl<'w> Tracker<'w> {
    /// Checks up front that every tensor the configuration will touch is
    /// present.
    pub fn new(weights: &'w WeightsContainer, cfg: TrackerConfig) -> Result<Self> {
        if !(cfg.tau > 0.0 && cfg.sigma > 0.0) {
            return Err(Error::InvalidArgument(format!("tau {} and sigma {} must be positive", cfg.tau, cfg.sigma)));
        }
        for name in ["init.fuse.weight", "init.fuse.bias", "init.occ.weight", "init.occ.bias"] {
            weights.get(name)?;
        }
        if cfg.backbone == BackboneKind::Learned {
            for b in 0..3 {
                weights.get(&format!("backbone.block{b}.conv.weight"))?;
            }
        }
        if cfg.refiner == RefinerKind::Learned {
            Refiner::new(weights, RefinerConfig::new(cfg.variant))?;
            CorrEncoder::new(weights, cfg.variant)?;
        }
        Ok(Self { weights, cfg })
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    pub fn pyramid(&self, video: &Video) -> Result<FeaturePyramid> {
        match self.cfg.backbone {
            BackboneKind::Learned => extract_pyramid(video, self.weights),
            BackboneKind::PatchIdentity => Ok(patch_identity_pyramid(video)),
        }
    }

    pub fn stage1(&self, pyr: &FeaturePyramid, query: &QueryPoint) -> Result<(Track, OcclusionTrack)> {
        let gc = global_correlation(pyr, query)?;
        init_track(&gc, self.weights, self.cfg.tau, self.cfg.sigma)
    }

    pub fn track_point(&self, pyr: &FeaturePyramid, query: &QueryPoint, counter: Option<&MacCounter>) -> Result<PointResult> {
        let (track, occl) = self.stage1(pyr, query)?;
        let r = match self.cfg.refiner {
            RefinerKind::Learned => {
                let rc = RefinerConfig::new(self.cfg.variant).with_iterations(self.cfg.iterations);
                iterate(track, occl, pyr, query, self.weights, &rc, counter)?
            }
            RefinerKind::Argmax => iterate_argmax(track, occl, pyr, query, self.cfg.iterations, self.cfg.tau, self.cfg.sigma),
        };
        Ok(PointResult {
            query: *query,
            track: r.track,
            occlusion: r.occlusion,
            history: r.history,
        })
    }

    /// Queries are independent and run in parallel; results keep input order.
    pub fn track_points(&self, pyr: &FeaturePyramid, queries: &[QueryPoint], counter: Option<&MacCounter>) -> Result<Vec<PointResult>> {
        queries.par_iter().map(|q| self.track_point(pyr, q, counter)).collect()
    }

    pub fn run(&self, video: &Video, queries: &[QueryPoint]) -> Result<Vec<PointResult>> {
        let pyr = self.pyramid(video)?;
        self.track_points(&pyr, queries, None)
    }

    pub fn track_file(&self, video: &Video, queries: &[QueryEntry]) -> Result<TrackFile> {
        let points: Vec<QueryPoint> = queries.iter().map(QueryEntry::point).collect();
        let results = self.run(video, &points)?;
        let points = results
            .iter()
            .zip(queries)
            .map(|(r, q)| {
                let mut p = PointPrediction::new(r.query, q.track_id, &r.track, &r.occlusion);
                if self.cfg.keep_history {
                    p.history = Some(r.history.iter().map(|h| h.positions.clone()).collect());
                }
                p
            })
            .collect();
        Ok(TrackFile::new(
            video.num_frames(),
            FrameSize { width: video.width(), height: video.height() },
            points,
        ))
    }
}

/// Where the weights for a run come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum WeightsSource {
    File(PathBuf),
    Seeded(RngSeed),
}

impl WeightsSource {
    /// Loaded and checked against the variant manifest. Identity fusion
    /// replaces the Stage I conv with a level-0 pass-through.
    pub fn resolve(&self, variant: Variant, identity_fusion: bool) -> Result<WeightsContainer> {
        let mut w = match self {
            WeightsSource::File(p) => WeightsContainer::load_for_variant(p, variant)?,
            WeightsSource::Seeded(seed) => init_weights(variant, *seed),
        };
        if identity_fusion {
            set_identity_fusion(&mut w);
        }
        Ok(w)
    }
}

#[derive(Clone, Debug)]
pub struct TrackJob {
    pub video: PathBuf,
    pub queries: PathBuf,
    pub weights: WeightsSource,
    pub identity_fusion: bool,
    pub config: TrackerConfig,
    pub out: PathBuf,
    pub overlays: Option<PathBuf>,
}

/// Read inputs, track, write the JSON track file (and overlays if asked).
/// Inputs are never written to.
pub fn run_track(job: &TrackJob) -> Result<TrackFile> {
    let video = io::load_video(&job.video)?;
    let queries = QueryFile::load(&job.queries)?;
    let weights = job.weights.resolve(job.config.variant, job.identity_fusion)?;
    let tracker = Tracker::new(&weights, job.config.clone())?;
    let file = tracker.track_file(&video, &queries.queries)?;
    file.save(&job.out)?;
    if let Some(dir) = &job.overlays {
        io::render_overlays(&video, &file, dir)?;
    }
    Ok(file)
}

/// Match predictions to the queries `mode` draws from each ground-truth
/// track (by `track_id` and query frame) and score them.
pub fn evaluate_files(pred: &TrackFile, gt: &GroundTruthFile, mode: QueryMode) -> Result<MetricsReport> {
    let frame = gt.frame_size();
    if pred.frame_size() != frame {
        return Err(Error::InvalidArgument(format!(
            "prediction frame {}×{} differs from ground truth {}×{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    let tracks: Vec<(Track, OcclusionTrack)> = pred.points.iter().map(|p| (p.track(), p.occlusion())).collect();
    let mut samples = Vec::new();
    for (id, g) in gt.tracks.iter().enumerate() {
        for q in sample_queries(g, mode) {
            let i = pred
                .points
                .iter()
                .position(|p| p.track_id == Some(id) && p.query.t == q.t)
                .ok_or_else(|| Error::InvalidArgument(format!("no prediction for track {id} queried at frame {}", q.t)))?;
            samples.push(Sample { track: &tracks[i].0, occlusion: &tracks[i].1, gt: g });
        }
    }
    evaluate(&samples, frame)
}

pub fn run_eval(pred_path: &Path, gt_path: &Path, mode: QueryMode) -> Result<MetricsReport> {
    evaluate_files(&TrackFile::load(pred_path)?, &GroundTruthFile::load(gt_path)?, mode)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VideoFormat {
    Png,
    Tensor,
}

str_enum!(VideoFormat { Png => "png", Tensor => "tensor" });

/// Paths written by [`write_synth`].
#[derive(Clone, Debug)]
pub struct SynthPaths {
    pub video: PathBuf,
    pub ground_truth: PathBuf,
    pub queries: PathBuf,
}

/// Lay a synthetic sample out on disk: `frames/` or `video.ltw`,
/// `gt.json`, and `queries.json` holding the queries `mode` draws.
pub fn write_synth(data: &SynthData, dir: &Path, format: VideoFormat, mode: QueryMode) -> Result<SynthPaths> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let video = match format {
        VideoFormat::Png => {
            let p = dir.join("frames");
            io::save_video_png(&data.video, &p)?;
            p
        }
        VideoFormat::Tensor => {
            let p = dir.join("video.ltw");
            io::save_video_tensor(&data.video, &p)?;
            p
        }
    };
    let frame = FrameSize { width: data.video.width(), height: data.video.height() };
    let ground_truth = dir.join("gt.json");
    GroundTruthFile::new(frame, data.tracks.clone()).save(&ground_truth)?;
    let entries = data
        .tracks
        .iter()
        .enumerate()
        .flat_map(|(id, g)| {
            sample_queries(g, mode)
                .into_iter()
                .map(move |q| QueryEntry { x: q.x, y: q.y, t: q.t, track_id: Some(id) })
        })
        .collect();
    let queries = dir.join("queries.json");
    QueryFile::new(entries).save(&queries)?;
    Ok(SynthPaths { video, ground_truth, queries })
}
