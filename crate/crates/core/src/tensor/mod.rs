//! Dense tensors, a reverse-mode tape, parameters and the Adam optimizer.

mod array;
pub mod gradcheck;
mod optim;
mod params;
mod real;
mod tape;

use thiserror::Error;

pub use array::Tensor;
pub use gradcheck::{grad_check, grad_check_params, GradCheckEntry, GradCheckReport};
pub use optim::{adam_step, AdamConfig};
pub use params::{ParamGroup, ParamId, ParamStore, Parameter};
pub use real::{Precision, Real};
pub use tape::{Gradients, Op, OpKind, SparseMatrix, Tape, Var, MIN_NORM};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{kind}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        kind: OpKind,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{kind}: non-finite value produced")]
    NonFinite { kind: OpKind },
    #[error("{kind}: expected a different number of inputs, got {got}")]
    Arity { kind: OpKind, got: usize },
    #[error("{kind}: index {index} out of range for {len} rows")]
    IndexOutOfRange { kind: OpKind, index: usize, len: usize },
    #[error("shape {shape:?} does not hold {len} elements")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("{context}: {shape:?}")]
    InvalidShape {
        context: &'static str,
        shape: Vec<usize>,
    },
    #[error("invalid attribute: {context}")]
    InvalidAttr { context: &'static str },
    #[error("loss must be a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,
    #[error("l2_normalize_last_dim: degenerate row with norm {norm:e}")]
    DegenerateNorm { norm: f64 },
    #[error("duplicate parameter name {0:?}")]
    DuplicateParameter(String),
    #[error("parameter {0:?} has no gradient")]
    MissingGrad(String),
    #[error("learning rate and multipliers must be positive, got {0}")]
    InvalidLearningRate(f64),
}
