use std::path::PathBuf;

use crate::data_model::ValidationReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid value: {0}")]
    Invalid(ValidationReport),

    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("degenerate intensity range")]
    DegenerateIntensity,

    #[error("empty labeled set")]
    EmptyLabeledSet,

    #[error("shape/depth mismatch: {height}x{width} is not divisible by 2^{depth}")]
    ShapeDepthMismatch {
        height: usize,
        width: usize,
        depth: usize,
    },

    #[error("network parameters are uninitialized")]
    UninitializedParameters,

    #[error("PLG requires precise labels")]
    NoPreciseLabels,

    #[error("empty pseudo-label record set")]
    EmptyRecords,

    #[error("unknown ablation axis `{0}`")]
    UnknownAxis(String),

    #[error("structuring element radius must be >= 1, got {0}")]
    InvalidRadius(usize),

    #[error("checkpoint format version {found} does not match supported version {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("invalid phantom specification: {0}")]
    Phantom(String),

    #[error("invalid mask file {path}: {reason}")]
    MaskFormat { path: PathBuf, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image {
            path: path.into(),
            source,
        }
    }
}
