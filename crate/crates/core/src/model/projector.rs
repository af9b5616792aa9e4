use super::config::{Activation, ProjectorConfig};
use super::layers::{self, Init};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamSet, Scalar, Tensor, Var};

pub const PROJECTOR_PREFIX: &str = "projector/";

pub fn init_projector<T: Scalar>(init: &mut Init, p: &mut ParamSet<T>, cfg: &ProjectorConfig) -> Result<()> {
    init.linear(p, "projector/fc1", cfg.in_width, cfg.hidden, true)?;
    init.linear(p, "projector/fc2", cfg.hidden, cfg.out_width, true)
}

/// Square identity projector with zero biases (for tests and warm starts).
pub fn identity_projector<T: Scalar>(width: usize) -> Result<(ProjectorConfig, ParamSet<T>)> {
    let cfg = ProjectorConfig { in_width: width, hidden: width, out_width: width, activation: Activation::Identity };
    let mut p = ParamSet::new();
    p.insert("projector/fc1/w", Tensor::eye(width))?;
    p.insert("projector/fc1/b", Tensor::zeros(&[width]))?;
    p.insert("projector/fc2/w", Tensor::eye(width))?;
    p.insert("projector/fc2/b", Tensor::zeros(&[width]))?;
    Ok((cfg, p))
}

/// Maps every token `[rows × in_width]` to `[rows × out_width]`.
pub fn projector_forward<T: Scalar>(g: &mut Graph<T>, p: &ParamSet<T>, cfg: &ProjectorConfig, tokens: Var) -> Result<Var> {
    let w = g.value(tokens).cols();
    if w != cfg.in_width {
        return Err(Error::Config(format!("projector expects width {}, tokens have {w}", cfg.in_width)));
    }
    let h = layers::linear(g, p, "projector/fc1", tokens)?;
    let h = match cfg.activation {
        Activation::Gelu => g.gelu(h),
        Activation::Identity => h,
    };
    layers::linear(g, p, "projector/fc2", h)
}

/// Eager projection of `[N, T, width]` tokens to `[N, T, out_width]`.
pub fn project_tokens<T: Scalar>(p: &ParamSet<T>, cfg: &ProjectorConfig, tokens: &Tensor<T>) -> Result<Tensor<T>> {
    let s = tokens.shape().to_vec();
    let mut g = Graph::new();
    let x = g.constant(tokens.clone());
    let y = projector_forward(&mut g, p, cfg, x)?;
    let mut shape = s;
    *shape.last_mut().unwrap() = cfg.out_width;
    g.value(y).clone().reshape(&shape)
}
