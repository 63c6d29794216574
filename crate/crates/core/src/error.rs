use thiserror::Error;

/// Errors raised by the pose-estimation pipeline.
///
/// Every variant maps onto a stable numeric code (see [`Error::code`]) which
/// the C ABI exposes to callers in other languages.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("point has non-positive camera depth {depth}")]
    NonPositiveDepth { depth: f64 },

    #[error("cell ({row}, {col}) is outside the {rows}x{cols} grid of level {level}")]
    OutOfBounds {
        level: usize,
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },

    #[error("pyramid level {0} does not exist")]
    NoSuchLevel(usize),

    #[error("projected hull is degenerate (area {area})")]
    DegenerateHull { area: f64 },

    #[error("object size must be positive, got {0}")]
    NonPositiveSize(f64),

    #[error("camera ray has zero length")]
    ZeroRay,

    #[error("degenerate correspondence configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("too few correspondences: need {needed}, got {got}")]
    TooFewCorrespondences { needed: usize, got: usize },

    #[error("no consensus: best hypothesis has {inliers} inliers, need {needed}")]
    NoConsensus { inliers: usize, needed: usize },

    #[error("no cell reaches the objectness threshold {threshold}")]
    NoDetection { threshold: f64 },

    #[error("ground-truth translation is zero")]
    ZeroTranslation,

    #[error("depth {depth_over_d} (in diameters) of sample {index} lies outside every band")]
    OutOfRange { index: usize, depth_over_d: f64 },

    #[error("object is not visible from the camera")]
    ObjectNotVisible,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    /// Stable numeric code, shared with the C ABI. Zero is reserved for success.
    pub fn code(&self) -> i32 {
        match self {
            Error::NonPositiveDepth { .. } => 1,
            Error::OutOfBounds { .. } => 2,
            Error::NoSuchLevel(_) => 3,
            Error::DegenerateHull { .. } => 4,
            Error::NonPositiveSize(_) => 5,
            Error::ZeroRay => 6,
            Error::DegenerateConfiguration(_) => 7,
            Error::TooFewCorrespondences { .. } => 8,
            Error::NoConsensus { .. } => 9,
            Error::NoDetection { .. } => 10,
            Error::ZeroTranslation => 11,
            Error::OutOfRange { .. } => 12,
            Error::ObjectNotVisible => 13,
            Error::InvalidParameter(_) => 14,
            Error::Parse(_) => 15,
            Error::Io(_) => 16,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
