use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("descriptor at grid cell ({row}, {col}) has norm below 1e-12")]
    ZeroDescriptor { row: usize, col: usize },

    #[error("point ({x}, {y}) lies outside the {width}x{height} image")]
    OutOfBounds { x: f64, y: f64, width: usize, height: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("feature grids differ: {left:?} vs {right:?}")]
    GridMismatch { left: (usize, usize), right: (usize, usize) },

    #[error("feature map is not l2-normalized")]
    NotNormalized,

    #[error("empty input: {0}")]
    EmptyList(&'static str),

    #[error("backend `{0}` is unavailable")]
    BackendUnavailable(String),

    #[error("timestep {timestep} is outside the schedule [0, {max})")]
    InvalidTimestep { timestep: u32, max: u32 },

    #[error("temperature must be positive, got {0}")]
    NonPositiveTau(f64),

    #[error("kernel size must be odd, got {0}")]
    EvenKernel(usize),

    #[error("grid point ({row}, {col}) outside {rows}x{cols} grid")]
    OutOfGrid { row: i64, col: i64, rows: usize, cols: usize },

    #[error("no correspondences to evaluate")]
    EmptyCorrespondences,

    #[error("depth must be positive, got {0}")]
    InvalidDepth(f64),

    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),

    #[error("insufficient overlap between frames {source_frame} and {target_frame}: {fraction:.4}")]
    InsufficientOverlap { source_frame: usize, target_frame: usize, fraction: f64 },

    #[error("unsupported backbone `{0}`")]
    UnsupportedBackbone(String),

    #[error("model already carries a head")]
    HeadAlreadyPresent,

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("unknown image id `{0}`")]
    UnknownId(String),

    #[error("pair strategy unavailable: {0}")]
    StrategyUnavailable(String),

    #[error("label map is not an involution: {0}")]
    NonInvolutionMap(String),

    #[error("bounding box required for bbox-referenced PCK")]
    MissingBBox,

    #[error("length mismatch: {0} predictions vs {1} ground-truth points")]
    LengthMismatch(usize, usize),

    #[error("all descriptors are identical")]
    DegenerateFeatures,

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("checkpoint does not match backbone: {0}")]
    CheckpointMismatch(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("I/O failure on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("malformed {what}: {message}")]
    Parse { what: String, message: String },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn parse(what: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse { what: what.into(), message: message.to_string() }
    }
}
