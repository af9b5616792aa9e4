//! Pre-norm transformer blocks shared by every tower.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::numerics::{AttnSpec, Graph, ParamSet, Scalar, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;
const POS_STD: f64 = 0.01;

/// Seeded parameter initialiser: truncated normal (±2σ) for weights,
/// zeros for biases and norm offsets, ones for norm gains.
pub struct Init {
    rng: ChaCha8Rng,
    std: f64,
}

impl Init {
    pub fn new(seed: u64, std: f64) -> Self {
        Init { rng: ChaCha8Rng::seed_from_u64(seed), std }
    }

    pub fn trunc_normal<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        let std = self.std;
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break T::lit(z * std);
            }
        })
    }

    pub fn linear<T: Scalar>(&mut self, p: &mut ParamSet<T>, prefix: &str, din: usize, dout: usize, bias: bool) -> Result<()> {
        p.insert(format!("{prefix}/w"), self.trunc_normal(&[din, dout]))?;
        if bias {
            p.insert(format!("{prefix}/b"), Tensor::zeros(&[dout]))?;
        }
        Ok(())
    }

    /// Learned position table `[context × width]`, drawn at std 0.01.
    pub fn positions<T: Scalar>(&mut self, p: &mut ParamSet<T>, name: &str, context: usize, width: usize) -> Result<()> {
        let std = std::mem::replace(&mut self.std, POS_STD);
        let t = self.trunc_normal(&[context, width]);
        self.std = std;
        p.insert(name, t)
    }

    pub fn norm<T: Scalar>(&mut self, p: &mut ParamSet<T>, prefix: &str, d: usize) -> Result<()> {
        p.insert(format!("{prefix}/g"), Tensor::full(&[d], T::one()))?;
        p.insert(format!("{prefix}/b"), Tensor::zeros(&[d]))
    }
}

/// Adds rows `0..len` of a learned position table to a `[B·len × width]` input.
pub fn add_positions<T: Scalar>(g: &mut Graph<T>, p: &ParamSet<T>, table: &str, x: Var, len: usize) -> Result<Var> {
    let t = g.param(p, table)?;
    let pe = g.gather_rows(t, (0..len).collect())?;
    g.add_tiled(x, pe)
}

pub fn block_name(prefix: &str, i: usize) -> String {
    format!("{prefix}/blocks/{i:02}")
}

/// Registers one block: self-attention, optional cross-attention over a
/// memory of width `cross_width`, and a GELU MLP.
pub fn init_block<T: Scalar>(
    init: &mut Init,
    p: &mut ParamSet<T>,
    prefix: &str,
    width: usize,
    mlp: usize,
    cross_width: Option<usize>,
) -> Result<()> {
    init.norm(p, &format!("{prefix}/ln1"), width)?;
    for proj in ["q", "k", "v", "o"] {
        init.linear(p, &format!("{prefix}/attn/{proj}"), width, width, true)?;
    }
    if let Some(cw) = cross_width {
        init.norm(p, &format!("{prefix}/ln_x"), width)?;
        init.linear(p, &format!("{prefix}/xattn/q"), width, width, true)?;
        init.linear(p, &format!("{prefix}/xattn/k"), cw, width, true)?;
        init.linear(p, &format!("{prefix}/xattn/v"), cw, width, true)?;
        init.linear(p, &format!("{prefix}/xattn/o"), width, width, true)?;
    }
    init.norm(p, &format!("{prefix}/ln2"), width)?;
    init.linear(p, &format!("{prefix}/mlp/fc1"), width, mlp, true)?;
    init.linear(p, &format!("{prefix}/mlp/fc2"), mlp, width, true)
}

/// Parameter count of one block, matching [`init_block`].
pub fn block_param_count(width: usize, mlp: usize, cross_width: Option<usize>) -> usize {
    let attn = 4 * (width * width + width);
    let cross = cross_width.map_or(0, |cw| 2 * width + 2 * (width * width + width) + 2 * (cw * width + width));
    2 * width + attn + cross + 2 * width + (width * mlp + mlp) + (mlp * width + width)
}

pub fn linear<T: Scalar>(g: &mut Graph<T>, p: &ParamSet<T>, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(p, &format!("{prefix}/w"))?;
    let b = if p.contains(&format!("{prefix}/b")) { Some(g.param(p, &format!("{prefix}/b"))?) } else { None };
    g.linear(x, w, b)
}

pub fn norm<T: Scalar>(g: &mut Graph<T>, p: &ParamSet<T>, prefix: &str, x: Var) -> Result<Var> {
    let gamma = g.param(p, &format!("{prefix}/g"))?;
    let beta = g.param(p, &format!("{prefix}/b"))?;
    g.layer_norm(x, gamma, beta, T::lit(LN_EPS))
}

/// Layout of a padded batch of sequences flattened to `[batch·len × width]`.
#[derive(Clone, Debug)]
pub struct SeqLayout {
    pub batch: usize,
    pub len: usize,
    pub key_lens: Option<Vec<usize>>,
}

/// Memory attended to by cross-attention.
pub struct Memory {
    pub tokens: Var,
    pub len: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn block_forward<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamSet<T>,
    prefix: &str,
    x: Var,
    heads: usize,
    layout: &SeqLayout,
    causal: bool,
    memory: Option<&Memory>,
) -> Result<Var> {
    let h = norm(g, p, &format!("{prefix}/ln1"), x)?;
    let q = linear(g, p, &format!("{prefix}/attn/q"), h)?;
    let k = linear(g, p, &format!("{prefix}/attn/k"), h)?;
    let v = linear(g, p, &format!("{prefix}/attn/v"), h)?;
    let spec = AttnSpec { batch: layout.batch, q_len: layout.len, k_len: layout.len, heads, causal, key_lens: layout.key_lens.clone() };
    let a = g.attention(q, k, v, spec)?;
    let a = linear(g, p, &format!("{prefix}/attn/o"), a)?;
    let mut x = g.add(x, a)?;
    if let Some(mem) = memory {
        let h = norm(g, p, &format!("{prefix}/ln_x"), x)?;
        let q = linear(g, p, &format!("{prefix}/xattn/q"), h)?;
        let k = linear(g, p, &format!("{prefix}/xattn/k"), mem.tokens)?;
        let v = linear(g, p, &format!("{prefix}/xattn/v"), mem.tokens)?;
        let spec = AttnSpec { batch: layout.batch, q_len: layout.len, k_len: mem.len, heads, causal: false, key_lens: None };
        let a = g.attention(q, k, v, spec)?;
        let a = linear(g, p, &format!("{prefix}/xattn/o"), a)?;
        x = g.add(x, a)?;
    }
    let h = norm(g, p, &format!("{prefix}/ln2"), x)?;
    let h = linear(g, p, &format!("{prefix}/mlp/fc1"), h)?;
    let h = g.gelu(h);
    let h = linear(g, p, &format!("{prefix}/mlp/fc2"), h)?;
    g.add(x, h)
}
