use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("axis {axis} out of range for tensor of rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("index {index} out of range for extent {extent}")]
    IndexOutOfRange { index: usize, extent: usize },
    #[error("reduction over an empty extent")]
    EmptyReduction,
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tensor was recorded on a different tape")]
    TapeMismatch,
    #[error("image dims {height}x{width} not divisible by patch size {patch}")]
    IndivisibleDims {
        height: usize,
        width: usize,
        patch: usize,
    },
    #[error("masked objective needs at least one masked patch")]
    EmptyMask,
    #[error("teacher grid {teacher:?} does not match student grid {student:?}")]
    GridMismatch {
        teacher: (usize, usize),
        student: (usize, usize),
    },
    #[error("frozen teacher needs a checkpoint")]
    MissingCheckpoint,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("`{key}` = {value} out of range: {expected}")]
    RangeViolation {
        key: String,
        value: String,
        expected: String,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found} unsupported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("unsupported image format in {path}: {format}")]
    UnsupportedFormat { path: PathBuf, format: String },
    #[error("corrupt image header in {path}: {message}")]
    CorruptHeader { path: PathBuf, message: String },
    #[error("class {0} has no samples")]
    DegenerateLabels(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
