//! Training losses: multi-positive contrastive alignment, auxiliary
//! captioning, and their weighted combination.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::model::{caption_decode_loss, text_forward, ModelConfig, TokenBatch, Tokenizer, VisionTower, LOGIT_SCALE};
use crate::numerics::{Graph, ParamSet, Scalar, Tensor, Var};

/// Allowed deviation of an embedding norm from 1.
pub const UNIT_NORM_TOL: f64 = 1e-5;

/// Which captions feed the contrastive term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CaptionSource {
    Synthetic,
    Original,
    /// Original and synthetic captions are both positives (K = 2).
    #[default]
    Both,
}

impl CaptionSource {
    pub fn captions_per_image(self) -> usize {
        match self {
            CaptionSource::Both => 2,
            _ => 1,
        }
    }
}

/// Ablation switches of the combined objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Toggles {
    pub use_decoder: bool,
    pub caption_source: CaptionSource,
    pub lambda_caption: f64,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles { use_decoder: true, caption_source: CaptionSource::Both, lambda_caption: 1.0 }
    }
}

/// Per-step loss terms. `total == contrastive + lambda_caption · captioning`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub contrastive: f64,
    pub captioning: f64,
    pub total: f64,
    pub lambda_caption: f64,
}

impl LossBreakdown {
    pub fn new(contrastive: f64, captioning: f64, lambda_caption: f64) -> Self {
        LossBreakdown { contrastive, captioning, total: contrastive + lambda_caption * captioning, lambda_caption }
    }
}

/// Unit-norm image embeddings with `K` unit-norm captions per image.
#[derive(Clone, Debug)]
pub struct ContrastiveBatch<T> {
    image_emb: Tensor<T>,
    caption_emb: Tensor<T>,
    temperature: T,
}

impl<T: Scalar> ContrastiveBatch<T> {
    /// `image_emb: [N × d]`, `caption_emb: [N × K × d]`, `temperature > 0`.
    pub fn new(image_emb: Tensor<T>, caption_emb: Tensor<T>, temperature: T) -> Result<Self> {
        let (is, cs) = (image_emb.shape(), caption_emb.shape());
        if is.len() != 2 || cs.len() != 3 || cs[0] != is[0] || cs[2] != is[1] {
            return Err(dim_err!("contrastive batch: images {is:?} vs captions {cs:?}"));
        }
        if !(temperature > T::zero()) || !temperature.is_finite() {
            return Err(Error::Contract(format!("temperature must be positive, got {temperature}")));
        }
        for (what, t) in [("image", &image_emb), ("caption", &caption_emb)] {
            for r in 0..t.rows() {
                let norm = t.row(r).iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > UNIT_NORM_TOL {
                    return Err(Error::Contract(format!("{what} embedding {r} has norm {norm}")));
                }
            }
        }
        Ok(ContrastiveBatch { image_emb, caption_emb, temperature })
    }

    pub fn n(&self) -> usize {
        self.image_emb.shape()[0]
    }

    pub fn k(&self) -> usize {
        self.caption_emb.shape()[1]
    }

    /// Logit table `[N × N·K]`, `s = u·v / τ`.
    pub fn logits(&self) -> Tensor<T> {
        let d = self.image_emb.cols();
        let caps = self.caption_emb.clone().reshape(&[self.n() * self.k(), d]).expect("validated shape");
        let s = self.image_emb.matmul(&caps.transpose().expect("matrix")).expect("validated shape");
        s.map(|v| v / self.temperature)
    }
}

/// Symmetric multi-positive InfoNCE.
///
/// Image→text averages `-log softmax` over each image's `K` positives with a
/// normaliser over all `N·K` captions; text→image treats each caption as a
/// query over the `N` images. The loss is the mean of both directions.
pub fn multi_positive_contrastive<T: Scalar>(batch: &ContrastiveBatch<T>) -> Result<T> {
    let mut g = Graph::new();
    let logits = g.constant(batch.logits());
    let loss = g.multi_positive_nce(logits, batch.n(), batch.k())?;
    Ok(g.value(loss).item())
}

/// One training batch of decoded images with both caption variants.
#[derive(Clone, Debug)]
pub struct CaptionedBatch<T> {
    /// `[N, R, R, 3]`, pixels in `[0, 1]`.
    pub images: Tensor<T>,
    pub original: Vec<String>,
    pub synthetic: Vec<String>,
}

impl<T: Scalar> CaptionedBatch<T> {
    pub fn len(&self) -> usize {
        self.original.len()
    }

    pub fn is_empty(&self) -> bool {
        self.original.is_empty()
    }

    /// Contrastive captions, `K` per image, image-major.
    fn contrastive_captions(&self, source: CaptionSource) -> Result<Vec<&str>> {
        let need_synth = source != CaptionSource::Original;
        if need_synth {
            if let Some(i) = self.synthetic.iter().position(|s| s.trim().is_empty()) {
                return Err(Error::Data(format!("record {i} has no synthetic caption but caption_source={source:?}")));
            }
        }
        Ok(match source {
            CaptionSource::Original => self.original.iter().map(String::as_str).collect(),
            CaptionSource::Synthetic => self.synthetic.iter().map(String::as_str).collect(),
            CaptionSource::Both => self.original.iter().zip(&self.synthetic).flat_map(|(o, s)| [o.as_str(), s.as_str()]).collect(),
        })
    }

    /// Decoder targets: the synthetic caption when available, except under
    /// `caption_source = original`, which trains the decoder on originals too.
    fn decoder_captions(&self, source: CaptionSource) -> Vec<&str> {
        self.original
            .iter()
            .zip(&self.synthetic)
            .map(|(o, s)| if source == CaptionSource::Original || s.trim().is_empty() { o.as_str() } else { s.as_str() })
            .collect()
    }
}

/// Graph handles of a combined-objective evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub contrastive: Var,
    pub captioning: Option<Var>,
    pub image_emb: Var,
    pub caption_emb: Var,
}

/// Builds the combined loss on `g` and returns it with its breakdown.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    params: &ParamSet<T>,
    config: &ModelConfig,
    tower: &VisionTower<T>,
    tokenizer: &Tokenizer,
    batch: &CaptionedBatch<T>,
    toggles: &Toggles,
) -> Result<(LossVars, LossBreakdown)> {
    let n = batch.len();
    if n == 0 || batch.synthetic.len() != n || batch.images.shape().first() != Some(&n) {
        return Err(dim_err!("captioned batch sizes disagree"));
    }
    let k = toggles.caption_source.captions_per_image();
    let captions = batch.contrastive_captions(toggles.caption_source)?;
    let seqs = captions.iter().map(|c| tokenizer.encode_with_eos(c, config.text.encoder_context)).collect::<Result<Vec<_>>>()?;
    let text_batch = TokenBatch::new(&seqs, tokenizer.pad_id())?;

    let vision = tower.forward(g, params, &batch.images)?;
    let image_emb = g.l2_normalize(vision.embedding);
    let text = text_forward(g, params, &config.text, &text_batch)?;
    let caption_emb = g.l2_normalize(text.embedding);
    let logits = g.matmul(image_emb, caption_emb, true)?;
    let ls = g.param(params, LOGIT_SCALE)?;
    let scale = g.exp(ls);
    let logits = g.scale_by(logits, scale)?;
    let contrastive = g.multi_positive_nce(logits, n, k)?;

    let lambda = if toggles.use_decoder { toggles.lambda_caption } else { 0.0 };
    let (total, captioning) = if toggles.use_decoder {
        let targets = batch
            .decoder_captions(toggles.caption_source)
            .iter()
            .map(|c| tokenizer.encode_with_eos(c, config.text.decoder_context))
            .collect::<Result<Vec<_>>>()?;
        let targets = TokenBatch::new(&targets, tokenizer.pad_id())?;
        let cap = caption_decode_loss(g, params, &config.text, vision.tokens, vision.tokens_per_image, &targets, tokenizer.bos_id())?;
        let weighted = g.scale(cap.loss, T::lit(lambda));
        (g.add(contrastive, weighted)?, Some(cap.loss))
    } else {
        (contrastive, None)
    };
    let c = g.value(contrastive).item().as_f64();
    let cap = captioning.map_or(0.0, |v| g.value(v).item().as_f64());
    if !c.is_finite() || !cap.is_finite() {
        return Err(Error::Numeric(format!("loss diverged: contrastive {c}, captioning {cap}")));
    }
    let vars = LossVars { total, contrastive, captioning, image_emb, caption_emb };
    Ok((vars, LossBreakdown::new(c, cap, lambda)))
}
