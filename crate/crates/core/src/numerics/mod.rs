//! Dense tensor kernels with a tape-based reverse-mode differentiator.

pub mod adam;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod ops;
pub mod param;
pub mod rng;
pub mod tensor;
pub mod tsr;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{Graph, Var};
pub use kernels::{gelu, layer_norm, leaky_relu, softmax};
pub use layers::{Conv3x3, Depthwise, Linear};
pub use ops::{conv2d, linear, pixel_shuffle, pixel_unshuffle, ConvMode, Padding};
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::{DType, Real, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("axis {axis} is out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("extent {extent} is not divisible by factor {factor}")]
    NotDivisible { extent: usize, factor: usize },
    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("tensor file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = NumericsError> = std::result::Result<T, E>;
