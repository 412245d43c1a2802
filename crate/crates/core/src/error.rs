use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the identification pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported audio format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt audio file {path}: {reason}")]
    CorruptFile { path: PathBuf, reason: String },
    #[error("audio contains no samples")]
    EmptyAudio,
    #[error("clip too short: {len} samples, need at least {needed}")]
    ClipTooShort { len: usize, needed: usize },
    #[error("degenerate block: {0}")]
    DegenerateBlock(String),
    #[error("too few beats: {onsets} onsets, need at least {needed}")]
    TooFewBeats { onsets: usize, needed: usize },
    #[error("block sets come from different channels ({0} vs {1})")]
    ChannelMismatch(String, String),
    #[error("block lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("cross-similarity matrix is empty")]
    EmptyCsm,
    #[error("alignment mask is empty")]
    EmptyMask,
    #[error("matrix is not square: {0}x{1}")]
    NonSquare(usize, usize),
    #[error("negative distance {value} at ({row}, {col})")]
    NegativeDistance { row: usize, col: usize, value: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("cross-diffusion needs at least 2 networks, got {0}")]
    TooFewNetworks(usize),
    #[error("missing features for song {0}")]
    MissingFeatures(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid cache file {path}: {reason}")]
    CacheFormat { path: PathBuf, reason: String },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by the input data rather than by the caller.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::InvalidParameter(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
