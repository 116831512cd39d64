use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: bad .flo magic {found} (expected 202021.25)")]
    BadMagic { path: PathBuf, found: f32 },
    #[error("{path}: truncated file ({found} bytes, expected {expected})")]
    Truncated { path: PathBuf, expected: usize, found: usize },
    #[error("{path}: non-finite flow value at pixel {index}")]
    NonFinite { path: PathBuf, index: usize },
    #[error("{path}: bad PGM header: {reason}")]
    BadHeader { path: PathBuf, reason: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("dimension mismatch: expected {expected:?}, found {found:?}")]
    DimensionMismatch { expected: (usize, usize), found: (usize, usize) },
    #[error("invalid patch size {patch_w}x{patch_h} for a {width}x{height} frame")]
    InvalidPatchSize { width: usize, height: usize, patch_w: usize, patch_h: usize },
    #[error("histogram bin counts differ ({0} vs {1})")]
    BinCountMismatch(usize, usize),
    #[error("retrieval pool holds {pool} histograms, fewer than K={k}")]
    PoolTooSmall { pool: usize, k: usize },
    #[error("K={0} is too small to fit a pairwise similarity model (need K >= 2)")]
    DegenerateK(usize),
    #[error("location {location} has {available} training histograms, fewer than K={k}")]
    InsufficientHistory { location: usize, available: usize, k: usize },
    #[error("no training clips supplied")]
    EmptyTraining,
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error("ground truth has no abnormal frames; TPR is undefined")]
    NoAbnormalFrames,
    #[error("ground truth has no normal frames; FPR is undefined")]
    NoNormalFrames,
    #[error("abnormal frame {0} has no ground-truth mask")]
    MissingMask(usize),
    #[error("all scores are equal; the ROC curve is degenerate")]
    DegenerateScores,
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("{path}: unsupported model file: {reason}")]
    BadModel { path: PathBuf, reason: String },
    #[error("internal invariant violated: {0}")]
    Invariant(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True when the error reflects a broken internal invariant rather than bad input.
    pub fn is_internal(&self) -> bool {
        matches!(self, Error::Invariant(_))
    }
}
