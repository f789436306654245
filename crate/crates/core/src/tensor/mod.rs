//! Dense tensor arithmetic with reverse-mode automatic differentiation.
//!
//! The engine is deliberately small: value-semantic [`Tensor`]s, a [`Tape`]
//! that records operations for one forward pass and is consumed by
//! [`Tape::backward`], and an [`AllocationMeter`] that tracks live tensor
//! payload bytes so training-memory claims can be validated against an
//! instrumented run.

mod dense;
mod gradcheck;
mod meter;
mod ops;
mod tape;

pub use dense::{Scalar, Tensor};
pub use gradcheck::{grad_check, grad_check_many, GradCheckReport};
pub use meter::{instrument_peak, meter_current_bytes, MeterError};
pub use ops::{Activation, PoolKind};
pub use tape::{Gradients, Tape, Var, VarId};

use thiserror::Error;

/// Contract violations raised by tensor construction and operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements but {got} were provided")]
    ElementCount {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("shape mismatch: left operand {left:?}, right operand {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("matmul inner dimensions disagree: left {left:?}, right {right:?}")]
    InnerDimMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("expected rank-{expected} tensor, got shape {shape:?}")]
    Rank { expected: usize, shape: Vec<usize> },
    #[error("conv2d output size is not integral: input {h}x{w}, kernel {k}, stride {stride}, padding {padding}")]
    NonIntegralConvOutput {
        h: usize,
        w: usize,
        k: usize,
        stride: usize,
        padding: usize,
    },
    #[error("conv2d kernel size {0} must be odd")]
    EvenKernel(usize),
    #[error("conv2d channel mismatch: input has {input} channels, kernel expects {kernel}")]
    ChannelMismatch { input: usize, kernel: usize },
    #[error("pool window {k} (stride {stride}) exceeds input {h}x{w}")]
    WindowExceedsInput {
        k: usize,
        stride: usize,
        h: usize,
        w: usize,
    },
    #[error("channels {channels} not divisible by head count {heads}")]
    HeadsIndivisible { channels: usize, heads: usize },
    #[error("reshape from {from:?} ({from_n} elements) to {to:?} ({to_n} elements)")]
    ReshapeCount {
        from: Vec<usize>,
        from_n: usize,
        to: Vec<usize>,
        to_n: usize,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("loss is detached from the tape: no recorded operation can reach it")]
    DetachedLoss,
    #[error("column slice [{start}, {start}+{len}) out of bounds for {cols} columns")]
    SliceOutOfBounds {
        start: usize,
        len: usize,
        cols: usize,
    },
    #[error("row index {index} out of bounds for {rows} rows")]
    RowOutOfBounds { index: usize, rows: usize },
    #[error("spatial dims {h}x{w} not divisible by patch size {patch}")]
    PatchIndivisible { h: usize, w: usize, patch: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("{0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;
