//! Dense tensors, the differentiation tape and a finite-difference checker.

mod gradcheck;
mod graph;
pub mod ops;
mod params;
mod scalar;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckConfig, GradEntry, GradReport, REL_EPS};
pub use graph::{Grads, Graph, Var};
pub use ops::{attention, layer_norm, softmax_rows, AttnSpec};
pub use params::ParamSet;
pub use scalar::{gemm, DType, Scalar, View};
pub use tensor::Tensor;
