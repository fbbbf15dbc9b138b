use thiserror::Error;

/// Errors produced by the matching pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing or malformed parameter: {0}")]
    Param(String),

    #[error("index out of bounds: {0}")]
    Bounds(String),

    #[error("file format error: {0}")]
    Format(String),

    #[error("backward called on a tensor not produced by a recorded computation")]
    Graph,

    #[error("annotation error: {0}")]
    Annotation(String),

    #[error("training diverged (non-finite loss) at step {step}")]
    Training { step: usize },

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("degenerate point under homography: vanishing denominator")]
    DegeneratePoint,

    #[error("metric undefined on an empty match set")]
    EmptyMatchSet,

    #[error("pipeline stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
