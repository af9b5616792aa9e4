use super::config::{Pool, VisionConfig};
use super::layers::{self, block_forward, block_name, init_block, Init, SeqLayout};
use super::pe::{patchify_batch, sincos_2d};
use crate::error::{dim_err, Result};
use crate::numerics::{Graph, ParamSet, Scalar, Tensor, Var};

pub const VISION_PREFIX: &str = "vision/";

/// Adds the vision-tower parameters (including the contrastive projection).
pub fn init_vision<T: Scalar>(init: &mut Init, p: &mut ParamSet<T>, cfg: &VisionConfig, embed_dim: usize) -> Result<()> {
    let d = cfg.width;
    init.linear(p, "vision/patch_embed", 3 * cfg.patch * cfg.patch, d, true)?;
    if cfg.pool == Pool::ClsToken {
        p.insert("vision/cls", init.trunc_normal(&[1, d]))?;
    }
    init.norm(p, "vision/ln_pre", d)?;
    for i in 0..cfg.layers {
        init_block(init, p, &block_name("vision", i), d, cfg.mlp(), None)?;
    }
    init.norm(p, "vision/ln_post", d)?;
    init.linear(p, "vision/proj", d, embed_dim, false)
}

/// Parameter count of the backbone; adds the projection head when
/// `embed_dim` is given.
pub fn vision_param_count(cfg: &VisionConfig, embed_dim: Option<usize>) -> usize {
    let d = cfg.width;
    let patch = 3 * cfg.patch * cfg.patch * d + d;
    let cls = if cfg.pool == Pool::ClsToken { d } else { 0 };
    let blocks = cfg.layers * layers::block_param_count(d, cfg.mlp(), None);
    patch + cls + 2 * d + blocks + 2 * d + embed_dim.map_or(0, |e| d * e)
}

/// Graph handles produced by a vision forward pass.
#[derive(Clone, Copy, Debug)]
pub struct VisionOut {
    /// Pooled representation `[N × width]`.
    pub pooled: Var,
    /// Pooled representation projected to the joint space `[N × embed_dim]`.
    pub embedding: Var,
    /// All tokens after the final norm, `[N·T × width]`.
    pub tokens: Var,
    pub batch: usize,
    pub tokens_per_image: usize,
}

/// The image tower plus its derived (non-learned) positional table.
#[derive(Clone, Debug)]
pub struct VisionTower<T> {
    cfg: VisionConfig,
    pe: Tensor<T>,
}

impl<T: Scalar> VisionTower<T> {
    pub fn new(cfg: VisionConfig) -> Result<Self> {
        cfg.validate()?;
        let g = cfg.grid();
        let pe = sincos_2d(g, g, cfg.width)?;
        Ok(VisionTower { cfg, pe })
    }

    pub fn config(&self) -> &VisionConfig {
        &self.cfg
    }

    pub fn pe(&self) -> &Tensor<T> {
        &self.pe
    }

    /// Switches input resolution, regenerating the positional table for the
    /// new grid. No learned parameter depends on resolution.
    pub fn set_resolution(&mut self, resolution: usize) -> Result<()> {
        let mut cfg = self.cfg.clone();
        cfg.resolution = resolution;
        *self = Self::new(cfg)?;
        Ok(())
    }

    /// Runs the tower on `[N, R, R, 3]` images with pixels in `[0, 1]`.
    pub fn forward(&self, g: &mut Graph<T>, p: &ParamSet<T>, images: &Tensor<T>) -> Result<VisionOut> {
        let s = images.shape();
        let r = self.cfg.resolution;
        if s.len() != 4 || s[1] != r || s[2] != r || s[3] != 3 {
            return Err(dim_err!("vision tower configured for {r}x{r} RGB images, got {s:?}"));
        }
        let n = s[0];
        let patches = g.constant(patchify_batch(images, self.cfg.patch)?);
        let x = layers::linear(g, p, "vision/patch_embed", patches)?;
        let pe = g.constant(self.pe.clone());
        let mut x = g.add_tiled(x, pe)?;
        let np = self.cfg.num_patches();
        let t = self.cfg.tokens_per_image();
        if self.cfg.pool == Pool::ClsToken {
            let cls = g.param(p, "vision/cls")?;
            let all = g.concat_rows(&[cls, x])?;
            let idx = (0..n).flat_map(|i| std::iter::once(0).chain((0..np).map(move |j| 1 + i * np + j))).collect();
            x = g.gather_rows(all, idx)?;
        }
        x = layers::norm(g, p, "vision/ln_pre", x)?;
        let layout = SeqLayout { batch: n, len: t, key_lens: None };
        for i in 0..self.cfg.layers {
            x = block_forward(g, p, &block_name("vision", i), x, self.cfg.heads, &layout, false, None)?;
        }
        let tokens = layers::norm(g, p, "vision/ln_post", x)?;
        let pooled = match self.cfg.pool {
            Pool::ClsToken => g.gather_rows(tokens, (0..n).map(|i| i * t).collect())?,
            Pool::Mean => g.group_mean(tokens, t)?,
        };
        let embedding = layers::linear(g, p, "vision/proj", pooled)?;
        Ok(VisionOut { pooled, embedding, tokens, batch: n, tokens_per_image: t })
    }
}

/// Eager forward: `(pooled [N × width], tokens [N, T, width])`.
pub fn vision_forward<T: Scalar>(tower: &VisionTower<T>, p: &ParamSet<T>, images: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut g = Graph::new();
    let out = tower.forward(&mut g, p, images)?;
    let d = tower.config().width;
    let tokens = g.value(out.tokens).clone().reshape(&[out.batch, out.tokens_per_image, d])?;
    Ok((g.value(out.pooled).clone(), tokens))
}

/// Eager unit-norm joint-space embeddings `[N × embed_dim]`.
pub fn vision_embed<T: Scalar>(tower: &VisionTower<T>, p: &ParamSet<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let out = tower.forward(&mut g, p, images)?;
    let e = g.l2_normalize(out.embedding);
    Ok(g.value(e).clone())
}
