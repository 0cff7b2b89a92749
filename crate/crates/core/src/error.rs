use std::path::PathBuf;

use thiserror::Error;

/// Every failure the engine can report.
///
/// Variant names double as the machine-readable error kind printed by the CLI.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("matrix is not positive definite (pivot {pivot} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated file: needed {needed} bytes at offset {offset}, {available} available")]
    TruncatedFile {
        offset: usize,
        needed: usize,
        available: usize,
    },

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: i64, num_classes: usize },

    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("dataset has no labels")]
    MissingLabels,

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("degenerate dataset: class {0} has no samples")]
    DegenerateDataset(usize),

    #[error("zero vector has no direction")]
    ZeroVector,

    #[error("all anchors are zero")]
    AllAnchorsZero,

    #[error("anchor is zero")]
    ZeroAnchor,

    #[error("class has no samples")]
    EmptyClass,

    #[error("need at least 2 populated classes, found {0}")]
    TooFewClasses(usize),

    #[error("class {0} has no surrogate distribution")]
    AbsentClass(usize),

    #[error("no target sample passed the confidence threshold")]
    NoConfidentSamples,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{path}:{line}: {message}")]
    ConfigParse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable identifier of the variant, used for machine-parsable CLI output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "ShapeMismatch",
            Error::NotPositiveDefinite { .. } => "NotPositiveDefinite",
            Error::NonFinite(_) => "NonFinite",
            Error::BadMagic { .. } => "BadMagic",
            Error::UnsupportedVersion(_) => "UnsupportedVersion",
            Error::TruncatedFile { .. } => "TruncatedFile",
            Error::LabelOutOfRange { .. } => "LabelOutOfRange",
            Error::IndexOutOfRange { .. } => "IndexOutOfRange",
            Error::MissingLabels => "MissingLabels",
            Error::InvalidDataset(_) => "InvalidDataset",
            Error::DegenerateDataset(_) => "DegenerateDataset",
            Error::ZeroVector => "ZeroVector",
            Error::AllAnchorsZero => "AllAnchorsZero",
            Error::ZeroAnchor => "ZeroAnchor",
            Error::EmptyClass => "EmptyClass",
            Error::TooFewClasses(_) => "TooFewClasses",
            Error::AbsentClass(_) => "AbsentClass",
            Error::NoConfidentSamples => "NoConfidentSamples",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::ConfigParse { .. } => "ConfigParse",
            Error::Io { .. } => "Io",
            Error::Csv(_) => "Csv",
            Error::Json(_) => "Json",
        }
    }

    pub(crate) fn shape(expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
