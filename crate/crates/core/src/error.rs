use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid value {value:?} for key {key}")]
    BadValue { key: String, value: String },
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed JSON in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error("missing frame {frame} of video {video_id}")]
    MissingFrame { video_id: String, frame: usize },
    #[error("annotation {annotation} references unknown video {video_id}")]
    UnknownVideo { annotation: String, video_id: String },
    #[error("annotation {annotation}: {message}")]
    Annotation { annotation: String, message: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("input {height}x{width} is not padded to a multiple of 32")]
    Unpadded { height: usize, width: usize },
    #[error("top-k size {k} exceeds {n} embeddings")]
    TopK { k: usize, n: usize },
    #[error("{targets} targets cannot be matched to {queries} queries")]
    TooManyTargets { targets: usize, queries: usize },
    #[error("empty frame range")]
    EmptyRange,
    #[error("class {class} out of range 0..={max}")]
    ClassOutOfRange { class: usize, max: usize },
    #[error("sub-clip length {subclip} is not in 1..={frames}")]
    Subclip { frames: usize, subclip: usize },
    #[error("non-finite loss at iteration {iteration}: component {component}")]
    NonFiniteLoss { iteration: usize, component: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("prediction references unknown video {0}")]
    UnknownVideoId(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
