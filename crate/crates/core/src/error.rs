use std::path::PathBuf;

/// Errors produced by the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty point set")]
    EmptyPointSet,
    #[error("non-finite coordinate in point {0}")]
    NonFinitePoint(usize),
    #[error("direction not normalized (norm {0})")]
    DirectionNotNormalized(f64),
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("stale tape: {0}")]
    StaleTape(&'static str),
    #[error("non-finite gradient in tensor `{0}`")]
    NonFiniteGradient(String),
    #[error("compression target not smaller than source (D = {0})")]
    CompressionTarget(usize),
    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("zero-norm point cannot be projected")]
    ZeroNormPoint,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("frame not rendered in training mode")]
    NotTrainingFrame,
    #[error("non-finite loss term `{0}`")]
    NonFiniteLoss(&'static str),
    #[error("non-finite loss at iteration {iteration}: term `{term}` ({detail})")]
    Diverged {
        iteration: usize,
        term: String,
        detail: String,
    },
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("bad raster header")]
    BadRasterHeader,
    #[error("manifest entry {entry}: {message}")]
    Manifest { entry: String, message: String },
    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("ply: {0}")]
    Ply(String),
    #[error("degenerate recipe: {0}")]
    Recipe(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("matrix not symmetric (asymmetry {0:e})")]
    Asymmetric(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
