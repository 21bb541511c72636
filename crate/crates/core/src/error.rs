use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("pixel buffer holds {actual} values, expected {width}x{height}")]
    SizeMismatch {
        width: usize,
        height: usize,
        actual: usize,
    },
    #[error("invalid camera intrinsics: {0}")]
    Intrinsics(String),
    #[error("pixel ({x}, {y}) lies outside a {width}x{height} frame")]
    OutOfBounds {
        x: usize,
        y: usize,
        width: usize,
        height: usize,
    },
    #[error("averaging radius must be at least 1")]
    ZeroRadius,
}

#[derive(Debug, Error)]
pub enum PgmError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed PGM at byte {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
    #[error("unsupported PGM: {0}")]
    Unsupported(String),
}

#[derive(Debug, Error)]
pub enum CandidateError {
    #[error("distance must be positive, got {0} mm")]
    InvalidDistance(f64),
    #[error("box centred at ({cx:.1}, {cy:.1}) with size {w:.1}x{h:.1} does not intersect the frame")]
    BoxOutsideFrame { cx: f64, cy: f64, w: f64, h: f64 },
    #[error("invalid extraction config: {0}")]
    Config(String),
}

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("backward called without a cached forward pass")]
    NoForwardCache,
    #[error("non-finite gradient in parameter tensor {0}")]
    NonFiniteGradient(usize),
    #[error("invalid network: {0}")]
    InvalidNetwork(String),
    #[error("model file error: {0}")]
    Format(String),
    #[error("model file version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("labels: {0}")]
    Labels(String),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset contains a single class; both head and non-head patches are required")]
    SingleClass,
    #[error("dataset is empty")]
    Empty,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("frame {path} referenced by annotations could not be loaded: {source}")]
    MissingFrame {
        path: PathBuf,
        #[source]
        source: PgmError,
    },
    #[error("annotation file {path}: {reason}")]
    Annotations { path: PathBuf, reason: String },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Candidate(#[from] CandidateError),
}

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("model expects {expected:?} inputs but patches are {patch_side}x{patch_side}")]
    ModelInput {
        expected: [usize; 3],
        patch_side: usize,
    },
    #[error("invalid detector config: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Candidate(#[from] CandidateError),
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene: {0}")]
    Scene(String),
    #[error("invalid corpus config: {0}")]
    Config(String),
    #[error("io error writing corpus: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Pgm(#[from] PgmError),
}
