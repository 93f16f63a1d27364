use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch on axis {axis}: expected {expected}, found {found}")]
    ShapeMismatch {
        op: &'static str,
        axis: usize,
        expected: usize,
        found: usize,
    },
    #[error("{op}: expected rank {expected}, found shape {found:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        found: Vec<usize>,
    },
    #[error("{op}: non-positive output extent on axis {axis}")]
    EmptyOutput { op: &'static str, axis: usize },
    #[error("{op}: invalid attribute: {reason}")]
    Attr { op: &'static str, reason: String },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("backward root must be scalar-shaped, found {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("unknown graph variable {0}")]
    UnknownVar(usize),
    #[error("non-finite function value while perturbing index {index}")]
    NonFinite { index: usize },
    #[error("finite-difference step must be positive")]
    BadStep,
    #[error("input extent {h} is below pooled level {l}")]
    BelowLevel { h: u64, l: u64 },
    #[error("pooled level must be at least 2, found {0}")]
    LevelTooSmall(u64),
    #[error(
        "pooling parameters failed validation: h={h} l={l} branch={branch} \
         kernel={kernel} stride={stride} padding={padding}"
    )]
    InvalidPooling {
        h: u64,
        l: u64,
        branch: &'static str,
        kernel: u64,
        stride: u64,
        padding: u64,
    },
    #[error("invalid level quadruple: {0}")]
    Levels(String),
    #[error("input {h}x{w} not accepted: extents must be multiples of {stride} and at least {min}")]
    InputSize {
        h: usize,
        w: usize,
        min: usize,
        stride: usize,
    },
    #[error("layer {layer}: {reason}")]
    Config { layer: String, reason: String },
}
