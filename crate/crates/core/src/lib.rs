//! Point tracking with local 4D correlation.
//!
//! The pipeline runs a strided convolutional backbone over every frame,
//! initialises a track per query from global cosine correlation, and then
//! refines it with a small transformer that reads compact embeddings of
//! local 4D correlation volumes.

pub mod backbone;
pub mod bench;
pub mod config;
pub mod corr_encoder;
pub mod correlation;
pub mod error;
pub mod io;
pub mod metrics;
pub mod numerics;
pub mod oracle;
pub mod pipeline;
pub mod refiner;
pub mod rng;
pub mod selftest;
pub mod synth;
pub mod track_init;
pub mod weights;

pub use backbone::{extract_pyramid, patch_identity_pyramid, FeaturePyramid, Video};
pub use config::Variant;
pub use correlation::QueryPoint;
pub use error::{Error, Result};
pub use metrics::{GroundTruthTrack, MetricsReport, QueryMode};
pub use numerics::Tensor;
pub use pipeline::{Tracker, TrackerConfig};
pub use synth::{synth_generate, SynthSpec};
pub use track_init::{OcclusionTrack, Track};
pub use weights::WeightsContainer;
