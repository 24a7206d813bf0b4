use std::io;

use thiserror::Error;

pub type Result<T, E = BroncoError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum BroncoError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("format error in `{field}`: {reason}")]
    Format { field: String, reason: String },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("no lungs found: {0}")]
    NoLungsFound(String),

    #[error("no air in mediastinum")]
    NoAirInMediastinum,

    #[error("no bundle voxels in class {0}")]
    NoBundleVoxels(u32),

    #[error("no airway candidate region")]
    NoAirwayCandidate,

    #[error("zero-length branch between identical node centers")]
    ZeroLengthBranch,

    #[error("bronchi modeling failed: {0}")]
    BronchiFailed(String),

    #[error("invalid phantom spec: {0}")]
    Spec(String),

    #[error("stage `{stage}` is missing its dependency `{artifact}`")]
    MissingDependency { stage: String, artifact: String },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<BroncoError>,
    },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl BroncoError {
    pub(crate) fn format(field: impl Into<String>, reason: impl Into<String>) -> Self {
        BroncoError::Format {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        BroncoError::Parameter(msg.into())
    }
}
