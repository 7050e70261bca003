use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("expected {expected} values, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("malformed layer wiring: dot product operands have {left} and {right} elements")]
    DotLength { left: usize, right: usize },

    #[error("layer `{layer}`: {detail}")]
    Shape { layer: String, detail: String },

    #[error("invalid model: layer `{layer}` field `{field}`: {reason}")]
    InvalidModel {
        layer: String,
        field: String,
        reason: String,
    },

    #[error("injection rate {0} outside [0, 1]")]
    InvalidRate(f64),

    #[error("probability {0} outside [0, 1]")]
    InvalidProbability(f64),

    #[error("{what} index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("mask for layer `{layer}` is {actual_rows}x{actual_cols}, crossbar is {rows}x{cols}")]
    MaskDims {
        layer: String,
        rows: usize,
        cols: usize,
        actual_rows: usize,
        actual_cols: usize,
    },

    #[error("layer `{0}` does not exist in the model")]
    UnknownLayer(String),

    #[error("layer `{0}` is not a binary conv/dense layer and cannot host faults")]
    NotInjectable(String),

    #[error("empty fault vector cannot cover a feature map of {0} elements")]
    EmptyFaultVector(usize),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u64),

    #[error("truncated {what}: need {needed} bytes, have {available}")]
    Truncated {
        what: &'static str,
        needed: usize,
        available: usize,
    },

    #[error("manifest and payload disagree: {0}")]
    Inconsistent(String),

    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("label {label} at index {index} is not below class count {classes}")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        classes: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sweep cell value={value} rep={rep}: {source}")]
    Cell {
        value: String,
        rep: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(layer: &str, detail: impl Into<String>) -> Self {
        Error::Shape {
            layer: layer.to_owned(),
            detail: detail.into(),
        }
    }

    pub(crate) fn model(layer: &str, field: &str, reason: impl Into<String>) -> Self {
        Error::InvalidModel {
            layer: layer.to_owned(),
            field: field.to_owned(),
            reason: reason.into(),
        }
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}
