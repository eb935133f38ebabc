//! On-disk formats: videos (PNG directory or LTW1 tensor), JSON track,
//! ground-truth and query files, and overlay images.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::backbone::Video;
use crate::correlation::QueryPoint;
use crate::error::{Error, Result};
use crate::metrics::{FrameSize, GroundTruthTrack};
use crate::numerics::{sigmoid, Tensor};
use crate::track_init::{OcclusionTrack, Track};
use crate::weights::WeightsContainer;

pub const SCHEMA_VERSION: u32 = 1;
/// Entry name of the frames tensor inside an LTW1 video file.
pub const VIDEO_ENTRY: &str = "video";

// ---- video -------------------------------------------------------------

/// A directory is read as numbered PNG frames (lexicographic order);
/// anything else as an LTW1 container holding a `video` entry.
pub fn load_video(path: impl AsRef<Path>) -> Result<Video> {
    let path = path.as_ref();
    if path.is_dir() {
        load_png_dir(path)
    } else {
        let w = WeightsContainer::load(path)?;
        Video::new(w.get(VIDEO_ENTRY)?.clone())
    }
}

pub fn save_video_tensor(video: &Video, path: impl AsRef<Path>) -> Result<()> {
    let mut w = WeightsContainer::new();
    w.insert(VIDEO_ENTRY, video.frames().clone())?;
    w.save(path)
}

fn png_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::InvalidArgument(format!("no PNG frames in {}", dir.display())));
    }
    Ok(files)
}

fn load_png_dir(dir: &Path) -> Result<Video> {
    let files = png_frames(dir)?;
    let mut data = Vec::new();
    let mut dims = None;
    for f in &files {
        let img = image::open(f)
            .map_err(|e| Error::Image(format!("{}: {e}", f.display())))?
            .to_rgb8();
        let d = img.dimensions();
        if *dims.get_or_insert(d) != d {
            return Err(Error::InvalidArgument(format!(
                "{}: frame is {}×{}, earlier frames {:?}",
                f.display(),
                d.0,
                d.1,
                dims.unwrap()
            )));
        }
        data.extend(img.into_raw().into_iter().map(|v| v as f32 / 255.0));
    }
    let (w, h) = dims.expect("at least one frame");
    Video::new(Tensor::new(vec![files.len(), h as usize, w as usize, 3], data)?)
}

fn to_rgb8(video: &Video, t: usize) -> RgbImage {
    let (h, w) = (video.height(), video.width());
    let raw = video
        .frame(t)
        .data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    RgbImage::from_raw(w as u32, h as u32, raw).expect("frame buffer matches extents")
}

/// Writes `frame_00000.png`, `frame_00001.png`, ... (8-bit quantised).
pub fn save_video_png(video: &Video, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for t in 0..video.num_frames() {
        let path = dir.join(format!("frame_{t:05}.png"));
        to_rgb8(video, t)
            .save(&path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

// ---- JSON files ----------------------------------------------------------

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Schema {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn check_version(path: &Path, v: u32) -> Result<()> {
    if v != SCHEMA_VERSION {
        return Err(Error::Schema {
            path: path.to_path_buf(),
            detail: format!("schema_version {v}, this build reads {SCHEMA_VERSION}"),
        });
    }
    Ok(())
}

fn schema(path: &Path, detail: String) -> Error {
    Error::Schema { path: path.to_path_buf(), detail }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FramePrediction {
    pub x: f32,
    pub y: f32,
    pub occl_prob: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointPrediction {
    pub query: QueryPoint,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub track_id: Option<usize>,
    pub frames: Vec<FramePrediction>,
    /// Positions after each refinement iteration, Stage I first.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub history: Option<Vec<Vec<[f32; 2]>>>,
}

impl PointPrediction {
    pub fn new(query: QueryPoint, track_id: Option<usize>, track: &Track, occl: &OcclusionTrack) -> Self {
        let frames = track
            .positions
            .iter()
            .zip(&occl.logits)
            .map(|(p, &l)| FramePrediction { x: p[0], y: p[1], occl_prob: sigmoid(l) })
            .collect();
        Self { query, track_id, frames, history: None }
    }

    pub fn track(&self) -> Track {
        Track { positions: self.frames.iter().map(|f| [f.x, f.y]).collect() }
    }

    /// Logits recovered from the stored probabilities.
    pub fn occlusion(&self) -> OcclusionTrack {
        let logit = |p: f32| {
            let p = p as f64;
            (p.ln() - (1.0 - p).ln()) as f32
        };
        OcclusionTrack { logits: self.frames.iter().map(|f| logit(f.occl_prob)).collect() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackFile {
    pub schema_version: u32,
    pub num_frames: usize,
    pub width: usize,
    pub height: usize,
    pub points: Vec<PointPrediction>,
}

impl TrackFile {
    pub fn new(num_frames: usize, frame: FrameSize, points: Vec<PointPrediction>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            num_frames,
            width: frame.width,
            height: frame.height,
            points,
        }
    }

    pub fn frame_size(&self) -> FrameSize {
        FrameSize { width: self.width, height: self.height }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(self, path.as_ref())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f: Self = read_json(path)?;
        check_version(path, f.schema_version)?;
        for (i, p) in f.points.iter().enumerate() {
            if p.frames.len() != f.num_frames {
                return Err(schema(path, format!("point {i} has {} frames, expected {}", p.frames.len(), f.num_frames)));
            }
            if let Some(h) = &p.history {
                if h.iter().any(|s| s.len() != f.num_frames) {
                    return Err(schema(path, format!("point {i} history length mismatch")));
                }
            }
        }
        Ok(f)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthFile {
    pub schema_version: u32,
    pub width: usize,
    pub height: usize,
    pub tracks: Vec<GroundTruthTrack>,
}

impl GroundTruthFile {
    pub fn new(frame: FrameSize, tracks: Vec<GroundTruthTrack>) -> Self {
        Self { schema_version: SCHEMA_VERSION, width: frame.width, height: frame.height, tracks }
    }

    pub fn frame_size(&self) -> FrameSize {
        FrameSize { width: self.width, height: self.height }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(self, path.as_ref())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f: Self = read_json(path)?;
        check_version(path, f.schema_version)?;
        for (i, g) in f.tracks.iter().enumerate() {
            if g.positions.len() != g.visible.len() {
                return Err(schema(path, format!("track {i}: positions and visible differ in length")));
            }
            let bad = g.positions.iter().zip(&g.visible).any(|(p, &v)| v && !(p[0].is_finite() && p[1].is_finite()));
            if bad {
                return Err(schema(path, format!("track {i}: non-finite position on a visible frame")));
            }
        }
        Ok(f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryEntry {
    pub x: f32,
    pub y: f32,
    pub t: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub track_id: Option<usize>,
}

impl QueryEntry {
    pub fn point(&self) -> QueryPoint {
        QueryPoint::new(self.x, self.y, self.t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryFile {
    pub schema_version: u32,
    pub queries: Vec<QueryEntry>,
}

impl QueryFile {
    pub fn new(queries: Vec<QueryEntry>) -> Self {
        Self { schema_version: SCHEMA_VERSION, queries }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(self, path.as_ref())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f: Self = read_json(path)?;
        check_version(path, f.schema_version)?;
        Ok(f)
    }
}

// ---- overlays ------------------------------------------------------------

const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];

/// One PNG per frame with every track drawn as a 5×5 marker: filled when
/// predicted visible, outline only when predicted occluded.
pub fn render_overlays(video: &Video, tracks: &TrackFile, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (w, h) = (video.width() as i64, video.height() as i64);
    for t in 0..video.num_frames() {
        let mut img = to_rgb8(video, t);
        for (i, p) in tracks.points.iter().enumerate() {
            let Some(f) = p.frames.get(t) else { continue };
            if !(f.x.is_finite() && f.y.is_finite()) {
                continue;
            }
            let (cx, cy) = (f.x.round() as i64, f.y.round() as i64);
            let filled = f.occl_prob < 0.5;
            for dy in -2..=2i64 {
                for dx in -2..=2i64 {
                    let edge = dx.abs() == 2 || dy.abs() == 2;
                    let (x, y) = (cx + dx, cy + dy);
                    if (filled || edge) && (0..w).contains(&x) && (0..h).contains(&y) {
                        img.put_pixel(x as u32, y as u32, Rgb(PALETTE[i % PALETTE.len()]));
                    }
                }
            }
        }
        let path = dir.join(format!("overlay_{t:05}.png"));
        img.save(&path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}
