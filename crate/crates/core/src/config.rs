//! Model hyperparameters shared across stages.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Pyramid levels used for global and local correlation.
pub const NUM_LEVELS: usize = 3;
pub const LEVEL_STRIDES: [usize; NUM_LEVELS] = [2, 4, 8];
pub const BACKBONE_WIDTHS: [usize; NUM_LEVELS] = [64, 128, 256];
/// Neighbourhood radius on both sides of the local 4D correlation.
pub const CORR_RADIUS: usize = 3;
pub const CORR_SIDE: usize = 2 * CORR_RADIUS + 1;
/// Softmax temperature of the kernel softargmax.
pub const SOFTARGMAX_TAU: f32 = 20.0;
/// Gaussian window std of the kernel softargmax, in grid cells.
pub const SOFTARGMAX_SIGMA: f32 = 2.5;
pub const REFINE_ITERATIONS: usize = 4;
pub const TRANSFORMER_LAYERS: usize = 3;
pub const MLP_RATIO: usize = 4;
pub const ENCODER_NORM_GROUPS: usize = 16;
pub const NORM_EPS: f32 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "S")]
    Small,
    #[serde(rename = "B")]
    Base,
}

/// One strided conv block of the correlation encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderBlock {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Variant {
    pub fn hidden(self) -> usize {
        match self {
            Variant::Small => 256,
            Variant::Base => 384,
        }
    }

    pub fn heads(self) -> usize {
        match self {
            Variant::Small => 4,
            Variant::Base => 6,
        }
    }

    pub fn encoder_blocks(self) -> &'static [EncoderBlock] {
        const SMALL: [EncoderBlock; 2] = [
            EncoderBlock { channels: 64, kernel: 5, stride: 4 },
            EncoderBlock { channels: 128, kernel: 2, stride: 2 },
        ];
        const BASE: [EncoderBlock; 3] = [
            EncoderBlock { channels: 64, kernel: 3, stride: 2 },
            EncoderBlock { channels: 128, kernel: 3, stride: 2 },
            EncoderBlock { channels: 128, kernel: 2, stride: 2 },
        ];
        match self {
            Variant::Small => &SMALL,
            Variant::Base => &BASE,
        }
    }

    /// Channel width of one encoder branch output.
    pub fn encoder_width(self) -> usize {
        self.encoder_blocks().last().unwrap().channels
    }

    /// Correlation embedding width: levels × branches × branch width.
    pub fn embedding_width(self) -> usize {
        NUM_LEVELS * 2 * self.encoder_width()
    }

    pub fn short_name(self) -> &'static str {
        match self {
            Variant::Small => "S",
            Variant::Base => "B",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "S" | "s" | "small" => Ok(Variant::Small),
            "B" | "b" | "base" => Ok(Variant::Base),
            _ => Err(Error::InvalidArgument(format!("unknown variant `{s}` (expected S or B)"))),
        }
    }
}
