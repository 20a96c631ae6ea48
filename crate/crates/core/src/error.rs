use thiserror::Error;

/// Errors raised while building or querying the geometric scaffolding.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParam { field: String, reason: String },

    #[error("resolution too coarse for level {level}: {reason}")]
    TooCoarse { level: i32, reason: String },

    #[error("node {0} is not in the node set")]
    UnknownNode(usize),

    #[error("cube {0} is not in the grid")]
    UnknownCube(usize),

    #[error("level {level} outside grid range {k_min}..={k_max}")]
    LevelOutOfRange { level: i32, k_min: i32, k_max: i32 },

    #[error("empty Whitney decomposition: {0}")]
    EmptyDecomposition(String),

    #[error("degenerate cutoff for cube {0}: no subcube survives")]
    DegenerateCutoff(usize),

    #[error("singular evaluation at point {point:?}: distance to the set {delta:e}")]
    Singular { point: [f64; 3], delta: f64 },

    #[error("normalization did not converge after {sweeps} sweeps (residual {residual:e})")]
    NoConvergence { sweeps: usize, residual: f64 },

    #[error("cube {0} has zero measure")]
    ZeroMeasure(usize),

    #[error("point {point} is not in cube {cube}")]
    NotInCube { point: usize, cube: usize },

    #[error("missing Θ value for Whitney box {0}")]
    MissingBoxValue(usize),

    #[error("{0}")]
    Unsupported(String),

    #[error("scenario field `{path}`: {message}")]
    Scenario { path: String, message: String },

    #[error("stage `{stage}`: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn param(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParam {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn in_stage(self, stage: &str) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}
