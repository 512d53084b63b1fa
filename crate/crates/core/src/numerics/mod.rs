//! Dense `f64` tensors, a reverse-mode tape, gradient checking and Adam.

mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;


pub use gradcheck::{grad_check, grad_check_params, relative_error, GradCheckReport, DEFAULT_REL_FLOOR};
pub use optim::{Adam, DEFAULT_LEARNING_RATE};
pub use params::ParamStore;
pub use tape::{Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("shape {shape:?} does not match {len} data elements")]
    BadData { shape: Vec<usize>, len: usize },
    #[error("{op}: mask length {got}, expected {expected}")]
    MaskLength {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{op}: every position is masked")]
    EmptyMask { op: &'static str },
    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("cannot normalize a zero-norm vector")]
    ZeroNorm,
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("backward called on an empty tape (no forward pass since the last backward)")]
    EmptyTape,
    #[error("tape handle refers to a cleared or foreign tape")]
    StaleVar,
    #[error("backward called on a gradient-free tape")]
    GradDisabled,
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}
