use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the attribution engine and its evaluation harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("no manifest.json in {0}")]
    MissingManifest(PathBuf),

    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("tensor `{0}` is missing")]
    MissingTensorFile(String),

    #[error("tensor `{name}` has the wrong size: expected {expected} bytes, found {actual}")]
    ShapeMismatch {
        name: String,
        expected: usize,
        actual: usize,
    },

    #[error("tensor `{0}` contains NaN or infinite values")]
    NonFiniteTensor(String),

    #[error("bundle is inconsistent: {0}")]
    InvalidBundle(String),

    #[error("degenerate coordinate range in region `{0}`")]
    DegenerateRange(String),

    #[error("value weighting requested but the bundle has no `value_norms` tensor")]
    ValueNormsMissing,

    #[error("bundle has no text-branch tensors")]
    TextTensorsMissing,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid fusion weights: {0}")]
    InvalidWeights(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid lexicon: {0}")]
    InvalidLexicon(String),

    #[error("score oracle failed on request {id}: {message}")]
    OracleFailure { id: i64, message: String },

    #[error("at least one ground-truth box is required")]
    NoGroundTruth,

    #[error("attribution map has zero total mass")]
    ZeroMass,

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
