use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("length mismatch in {what}: declared {declared} elements, found {found}")]
    LengthMismatch {
        what: String,
        declared: usize,
        found: usize,
    },

    #[error("unknown layer kind `{0}`")]
    UnknownLayerKind(String),

    #[error("incompatible shapes at layer `{layer}`: {detail}")]
    ShapeIncompatible { layer: String, detail: String },

    #[error("malformed container: {0}")]
    Format(String),

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("no strength predictor for layer `{0}`")]
    MissingPredictor(String),

    #[error("fingerprint mismatch: expected {expected}, found {found}")]
    Fingerprint { expected: String, found: String },

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
