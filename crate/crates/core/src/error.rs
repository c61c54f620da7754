use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: {detail}")]
    Shape { context: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {context}: {detail}")]
    NonFinite { context: &'static str, detail: String },

    #[error("sampler diverged at step {step} of {steps}")]
    SamplerDiverged { step: usize, steps: usize },

    #[error("chunk {chunk} failed during {stage}: {source}")]
    Chunk {
        chunk: usize,
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("reward model `{0}` is not differentiable; use it for evaluation only")]
    NotDifferentiable(String),

    #[error("unknown reward model `{0}`")]
    UnknownReward(String),

    #[error("overlapping speaker regions {0} and {1}")]
    OverlappingRegions(usize, usize),

    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("external scorer: {0}")]
    External(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(context: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        context,
        detail: detail.into(),
    }
}
