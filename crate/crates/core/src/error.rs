use std::path::PathBuf;

use crate::image::CropWindow;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),

    #[error("unsupported bit depth: {0}")]
    UnsupportedBitDepth(String),

    #[error("image dimensions overflow: {width}x{height}x{channels}")]
    DimensionOverflow {
        width: usize,
        height: usize,
        channels: usize,
    },

    #[error("malformed image data: {0}")]
    Malformed(String),

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("geometry violation: {0}")]
    Geometry(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("size mismatch: expected {expected}, got {got}")]
    SizeMismatch { expected: String, got: String },

    #[error("engine `{engine}` cannot compute `{score}` scores")]
    EngineUnsupported {
        engine: &'static str,
        score: &'static str,
    },

    #[error("score map {rows}x{cols} is too small for non-maximum suppression")]
    MapTooSmall { rows: usize, cols: usize },

    #[error("embedder terminated")]
    EmbedderTerminated,

    #[error("embedder timed out after {0:.1}s")]
    EmbedderTimeout(f64),

    #[error("embedder handshake failed: {0}")]
    Handshake(String),

    #[error("embedder protocol violation: {0}")]
    Protocol(String),

    #[error("invalid embedding: {0}")]
    InvalidEmbedding(String),

    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("embedding crop at top={} left={} size={} failed: {source}", window.top, window.left, window.size)]
    Embed {
        window: CropWindow,
        #[source]
        source: Box<Error>,
    },

    #[error("image `{id}` failed during {stage}: {source}")]
    AtImage {
        id: String,
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("unknown label `{0}`")]
    UnknownLabel(String),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("insufficient trials: need at least {needed}, got {got}")]
    InsufficientTrials { needed: usize, got: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at_image(id: &str, stage: &'static str, source: Error) -> Self {
        Error::AtImage {
            id: id.to_owned(),
            stage,
            source: Box::new(source),
        }
    }
}
