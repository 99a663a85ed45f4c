use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("numeric fault in {op}: {detail}")]
    NumericFault { op: &'static str, detail: String },
    #[error("{op}: extents {h}x{w} must be powers of two")]
    NotPowerOfTwo { op: &'static str, h: usize, w: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("step {step} outside schedule range 0..={total}")]
    StepOutOfRange { step: usize, total: usize },
    #[error("support mask has no foreground pixels")]
    EmptySupportMask,
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("dataset at {0} contains no classes")]
    EmptyDataset(PathBuf),
    #[error("missing mask for image {0}")]
    MissingMask(PathBuf),
    #[error("dimension mismatch: {image} is {image_dims:?} but {mask} is {mask_dims:?}")]
    DimensionMismatch {
        image: PathBuf,
        mask: PathBuf,
        image_dims: (u32, u32),
        mask_dims: (u32, u32),
    },
    #[error("unreadable file {path}: {reason}")]
    Unreadable { path: PathBuf, reason: String },
    #[error("mask {path} has non-binary value {value}")]
    InvalidMaskValue { path: PathBuf, value: u8 },
    #[error("class `{class}` has {count} samples, need at least 2")]
    TooFewSamples { class: String, count: usize },
    #[error("split violation: {0}")]
    SplitViolation(String),
    #[error("synthetic generation failed after {0} attempts")]
    GenerationFailed(usize),

    #[error("{path}:{line}: {reason}")]
    Config {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("training diverged at epoch {epoch} step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
