//! Tensors, parameters and the reverse-mode autodiff graph.

mod graph;
mod nn;
mod ops;
pub mod par;
mod param;
mod real;
mod tensor;

pub use graph::{BackwardFn, Gradients, Graph, Var};
pub use nn::{BatchStats, NormMode};
pub use ops::{gelu, lerp, sigmoid, silu, softplus};
pub use param::{ParamId, ParamInfo, ParamStore, Parameter};
pub use real::{gemm, DType, Real};
pub use tensor::Tensor;
