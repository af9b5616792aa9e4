//! Vision-encoder pretraining: a multi-positive contrastive objective with an
//! auxiliary caption decoder, a progressive-resolution curriculum, and a
//! desk-scale multimodal tuning harness.

pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod mllm;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod train;

pub use error::{Error, Result};
pub use numerics::{Graph, ParamSet, Scalar, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ParamSet32 = ParamSet<f32>;
pub type ParamSet64 = ParamSet<f64>;
pub type ModelWeights32 = model::ModelWeights<f32>;
pub type ModelWeights64 = model::ModelWeights<f64>;
