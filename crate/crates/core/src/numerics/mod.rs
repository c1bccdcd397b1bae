//! Dense `f64` tensors, a reverse-mode tape, and the optimizer.

mod checkpoint;
mod gradcheck;
mod graph;
pub mod kernels;
mod optim;
mod params;
mod tensor;


use thiserror::Error;

pub use checkpoint::{read_blocks, write_blocks, CheckpointError};
pub use gradcheck::{grad_check, grad_check_subset, relative_error, GradCheckReport};
pub use graph::{Gradients, Graph, ReduceOp, Var};
pub use optim::Adam;
pub use params::{GradStore, ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: index {index} out of range for extent {extent}")]
    Index {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("{op}: argument {value} outside the domain")]
    Domain { op: &'static str, value: f64 },
    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },
    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },
    #[error("loss must be a single value, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGradient { name: String },
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParameter(String),
}
