use std::path::PathBuf;

/// Errors produced by the editing engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("time-step {step} out of range [1, {steps}]")]
    StepOutOfRange { step: usize, steps: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("singular noise level at step {0}: alpha_bar is zero")]
    Singularity(usize),

    #[error("invalid edit: {0}")]
    InvalidEdit(String),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),

    #[error("sampler failed at {stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("empty region: {0}")]
    EmptyRegion(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("yaml error: {0}")]
    Yaml(#[from] serde_yaml::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps an error with the sampler stage it came from.
    pub fn at_stage(self, stage: impl Into<String>) -> Self {
        match self {
            // keep the innermost stage tag
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage: stage.into(),
                source: Box::new(e),
            },
        }
    }

    /// The error with any stage tags stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
