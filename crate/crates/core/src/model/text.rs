use super::config::TextConfig;
use super::layers::{self, block_forward, block_name, init_block, Init, Memory, SeqLayout};
use super::tokenizer::TokenBatch;
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamSet, Scalar, Var};

pub const TEXT_PREFIX: &str = "text_encoder/";
pub const DECODER_PREFIX: &str = "decoder/";

fn check_ids(ids: &[usize], vocab: usize, skip: Option<usize>) -> Result<()> {
    match ids.iter().find(|&&i| i >= vocab && Some(i) != skip) {
        Some(bad) => Err(Error::Data(format!("token id {bad} outside vocabulary of {vocab}"))),
        None => Ok(()),
    }
}

/// Token plus learned position embeddings for a padded batch.
fn embed_tokens<T: Scalar>(g: &mut Graph<T>, p: &ParamSet<T>, prefix: &str, ids: Vec<usize>, len: usize) -> Result<Var> {
    let t = g.param(p, &format!("{prefix}/tok_emb"))?;
    let x = g.gather_rows(t, ids)?;
    layers::add_positions(g, p, &format!("{prefix}/pos_emb"), x, len)
}

pub fn init_text_encoder<T: Scalar>(init: &mut Init, p: &mut ParamSet<T>, cfg: &TextConfig, embed_dim: usize) -> Result<()> {
    p.insert("text_encoder/tok_emb", init.trunc_normal(&[cfg.vocab_size, cfg.width]))?;
    init.positions(p, "text_encoder/pos_emb", cfg.encoder_context, cfg.width)?;
    for i in 0..cfg.layers {
        init_block(init, p, &block_name("text_encoder", i), cfg.width, cfg.mlp(), None)?;
    }
    init.norm(p, "text_encoder/ln_final", cfg.width)?;
    init.linear(p, "text_encoder/proj", cfg.width, embed_dim, false)
}

#[derive(Clone, Copy, Debug)]
pub struct TextOut {
    /// Final-norm feature at each sequence's last (eos) position `[N × width]`.
    pub pooled: Var,
    /// Projection to the joint space `[N × embed_dim]`.
    pub embedding: Var,
}

/// Causal text transformer pooled at the end-of-sequence token.
pub fn text_forward<T: Scalar>(g: &mut Graph<T>, p: &ParamSet<T>, cfg: &TextConfig, batch: &TokenBatch) -> Result<TextOut> {
    if batch.len > cfg.encoder_context {
        return Err(Error::ContextOverflow { length: batch.len, context: cfg.encoder_context });
    }
    check_ids(&batch.ids, cfg.vocab_size, None)?;
    let mut x = embed_tokens(g, p, "text_encoder", batch.ids.clone(), batch.len)?;
    let layout = SeqLayout { batch: batch.batch(), len: batch.len, key_lens: None };
    for i in 0..cfg.layers {
        x = block_forward(g, p, &block_name("text_encoder", i), x, cfg.heads, &layout, true, None)?;
    }
    let x = layers::norm(g, p, "text_encoder/ln_final", x)?;
    let last = batch.lens.iter().enumerate().map(|(i, &l)| i * batch.len + l - 1).collect();
    let pooled = g.gather_rows(x, last)?;
    let embedding = layers::linear(g, p, "text_encoder/proj", pooled)?;
    Ok(TextOut { pooled, embedding })
}

pub fn init_decoder<T: Scalar>(init: &mut Init, p: &mut ParamSet<T>, cfg: &TextConfig, vision_width: usize) -> Result<()> {
    p.insert("decoder/tok_emb", init.trunc_normal(&[cfg.vocab_size, cfg.width]))?;
    init.positions(p, "decoder/pos_emb", cfg.decoder_context, cfg.width)?;
    for i in 0..cfg.decoder_layers {
        init_block(init, p, &block_name("decoder", i), cfg.width, cfg.mlp(), Some(vision_width))?;
    }
    init.norm(p, "decoder/ln_final", cfg.width)?;
    init.linear(p, "decoder/head", cfg.width, cfg.vocab_size, true)
}

/// Result of a teacher-forced captioning pass.
#[derive(Clone, Copy, Debug)]
pub struct CaptionLoss {
    pub loss: Var,
    /// Number of non-pad target positions that entered the mean.
    pub positions: usize,
}

/// Mean next-token cross-entropy of a causal decoder that cross-attends to
/// the vision tokens. Inputs are the targets shifted right behind `bos`;
/// positions whose target equals `targets.pad` are excluded.
pub fn caption_decode_loss<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamSet<T>,
    cfg: &TextConfig,
    vision_tokens: Var,
    tokens_per_image: usize,
    targets: &TokenBatch,
    bos: usize,
) -> Result<CaptionLoss> {
    let (n, len) = (targets.batch(), targets.len);
    if len > cfg.decoder_context {
        return Err(Error::ContextOverflow { length: len, context: cfg.decoder_context });
    }
    if g.value(vision_tokens).rows() != n * tokens_per_image {
        return Err(Error::Dimension(format!("decoder memory has {} rows for {n} captions", g.value(vision_tokens).rows())));
    }
    check_ids(&targets.ids, cfg.vocab_size, Some(targets.pad))?;
    check_ids(&[bos], cfg.vocab_size, None)?;
    let mut inputs = Vec::with_capacity(n * len);
    let mut tgt = Vec::with_capacity(n * len);
    for i in 0..n {
        let row = &targets.ids[i * len..(i + 1) * len];
        inputs.push(bos);
        // a pad input only ever precedes pad targets, so any valid id works
        inputs.extend(row[..len - 1].iter().map(|&t| if t == targets.pad { bos } else { t }));
        tgt.extend(row.iter().map(|&t| (t != targets.pad).then_some(t)));
    }
    let mut x = embed_tokens(g, p, "decoder", inputs, len)?;
    let layout = SeqLayout { batch: n, len, key_lens: None };
    let memory = Memory { tokens: vision_tokens, len: tokens_per_image };
    for i in 0..cfg.decoder_layers {
        x = block_forward(g, p, &block_name("decoder", i), x, cfg.heads, &layout, true, Some(&memory))?;
    }
    let x = layers::norm(g, p, "decoder/ln_final", x)?;
    let logits = layers::linear(g, p, "decoder/head", x)?;
    let (loss, positions) = g.cross_entropy(logits, tgt)?;
    Ok(CaptionLoss { loss, positions })
}
