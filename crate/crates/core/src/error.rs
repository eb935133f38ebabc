use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing weight tensor `{0}`")]
    MissingWeight(String),

    #[error("weight `{name}` has shape {got:?}, manifest expects {expected:?}")]
    WeightShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("bad magic: expected \"LTW1\", found {0:?}")]
    BadMagic([u8; 4]),

    #[error("truncated tensor container: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },

    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),

    #[error("malformed container: {0}")]
    Malformed(String),

    #[error("schema violation in {path}: {detail}")]
    Schema { path: PathBuf, detail: String },

    #[error("image error: {0}")]
    Image(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable process exit code for each failure class.
    pub fn code(&self) -> i32 {
        match self {
            Error::Shape { .. } => 10,
            Error::InvalidArgument(_) => 11,
            Error::MissingWeight(_) => 20,
            Error::WeightShape { .. } => 21,
            Error::BadMagic(_) => 22,
            Error::Truncated { .. } => 23,
            Error::DuplicateName(_) => 24,
            Error::Malformed(_) => 25,
            Error::Schema { .. } => 30,
            Error::Json(_) => 31,
            Error::Image(_) => 32,
            Error::Io { .. } => 40,
        }
    }
}
