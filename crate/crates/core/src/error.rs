use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("reduction over no dimensions or over an empty extent")]
    EmptyReduction,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Errors raised by normalization, noise, variational and optimizer code.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("degenerate batch statistics: {0}")]
    DegenerateStatistics(String),
    #[error("evaluation mode requires running statistics (layer {0})")]
    MissingRunningStats(usize),
    #[error("non-positive normalizer in layer {0}")]
    NonPositiveSigma(usize),
    #[error("zero weight vector in layer {layer}, channel {channel}")]
    ZeroWeight { layer: usize, channel: usize },
    #[error("unsupported layer for analytic normalization: {0}")]
    UnsupportedLayer(String),
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("non-finite gradient in parameter {name} (step {step})")]
    NonFiniteGradient { name: String, step: usize },
    #[error("every candidate learning rate diverged")]
    AllCandidatesDiverged,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
