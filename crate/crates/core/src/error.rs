use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("invalid voxel grid: {0}")]
    InvalidGrid(String),

    #[error("invalid depth discretization: {0}")]
    InvalidBins(String),

    #[error("depth {depth} outside [{min}, {max}]")]
    DepthOutOfRange { depth: f64, min: f64, max: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(&'static str),

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("load error: {0}")]
    Load(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("comparison error: {0}")]
    Comparison(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn load(msg: impl Into<String>) -> Self {
        Error::Load(msg.into())
    }

    /// Process exit code for the command-line front end: 3 for data and
    /// contract errors, 4 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 4,
            _ => 3,
        }
    }
}
