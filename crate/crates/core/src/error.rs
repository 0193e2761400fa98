use thiserror::Error;

/// Errors raised by tensor arithmetic, the tape and model assembly.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("shape {shape:?} does not describe {len} elements (1 to 3 axes required)")]
    InvalidShape { shape: Vec<usize>, len: usize },

    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },

    #[error("dropout rate {0} outside [0, 1)")]
    InvalidRate(f64),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("tensor is not a leaf on this tape")]
    NotOnTape,

    #[error("target {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },

    #[error("feature width {dim} is not divisible by {heads} heads")]
    HeadSplit { dim: usize, heads: usize },

    #[error("{modality} features have width {got}, embedding expects {expected}")]
    ModalityWidth {
        modality: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid model configuration: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
