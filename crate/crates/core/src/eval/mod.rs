//! Zero-shot classification, retrieval recall@k, VQA exact match and report
//! emission. Ranking ties are broken by lowest index.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{stack_images, Image};
use crate::error::{dim_err, Error, Result};
use crate::model::{text_forward, vision_embed, ModelConfig, TokenBatch, Tokenizer, VisionTower};
use crate::numerics::{Graph, ParamSet, Scalar, Tensor};

/// Rows per forward pass when embedding a corpus.
pub const EMBED_CHUNK: usize = 64;

/// Unit-norm text embeddings `[N × embed_dim]`.
pub fn embed_texts<T: Scalar>(params: &ParamSet<T>, config: &ModelConfig, tokenizer: &Tokenizer, texts: &[&str]) -> Result<Tensor<T>> {
    if texts.is_empty() {
        return Err(dim_err!("no texts to embed"));
    }
    let mut rows = Vec::with_capacity(texts.len() * config.embed_dim);
    for chunk in texts.chunks(EMBED_CHUNK) {
        let seqs = chunk.iter().map(|t| tokenizer.encode_with_eos(t, config.text.encoder_context)).collect::<Result<Vec<_>>>()?;
        let batch = TokenBatch::new(&seqs, tokenizer.pad_id())?;
        let mut g = Graph::new();
        let out = text_forward(&mut g, params, &config.text, &batch)?;
        let e = g.l2_normalize(out.embedding);
        rows.extend_from_slice(g.value(e).data());
    }
    Tensor::new(vec![texts.len(), config.embed_dim], rows)
}

/// Unit-norm image embeddings `[N × embed_dim]`; images must match the
/// tower's resolution.
pub fn embed_images<T: Scalar>(tower: &VisionTower<T>, params: &ParamSet<T>, images: &[&Image]) -> Result<Tensor<T>> {
    if images.is_empty() {
        return Err(dim_err!("no images to embed"));
    }
    let mut rows = Vec::new();
    let mut dim = 0;
    for chunk in images.chunks(EMBED_CHUNK) {
        let e = vision_embed(tower, params, &stack_images::<T>(chunk)?)?;
        dim = e.cols();
        rows.extend_from_slice(e.data());
    }
    Tensor::new(vec![images.len(), dim], rows)
}

fn check_pair<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.cols() {
        return Err(dim_err!("embedding shapes {:?} and {:?} disagree", a.shape(), b.shape()));
    }
    Ok(())
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// 0-based rank of `target` among `scores`, counting strictly better scores
/// and equal scores at lower indices ahead of it.
pub fn rank_of<T: Scalar>(scores: &[T], target: usize) -> usize {
    let s = scores[target];
    scores.iter().enumerate().filter(|&(i, &x)| x > s || (x == s && i < target)).count()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ImageToText,
    TextToImage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub direction: Direction,
    pub recall_at: BTreeMap<usize, f64>,
}

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

fn recall_rows<T: Scalar>(sim: &Tensor<T>, ks: &[usize], direction: Direction) -> RetrievalResult {
    let n = sim.rows();
    let ranks: Vec<usize> = (0..n).map(|i| rank_of(sim.row(i), i)).collect();
    let recall_at = ks.iter().map(|&k| (k, ranks.iter().filter(|&&r| r < k).count() as f64 / n as f64)).collect();
    RetrievalResult { direction, recall_at }
}

/// Recall@k for paired embeddings (row `i` of each matches). Returns the
/// image→text and text→image results.
pub fn retrieval_recall<T: Scalar>(
    image_embs: &Tensor<T>,
    caption_embs: &Tensor<T>,
    ks: &[usize],
) -> Result<(RetrievalResult, RetrievalResult)> {
    check_pair(image_embs, caption_embs)?;
    let n = image_embs.rows();
    if caption_embs.rows() != n {
        return Err(dim_err!("{n} images but {} captions", caption_embs.rows()));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > n) {
        return Err(Error::Config(format!("recall@{k} needs 1 <= k <= corpus size {n}")));
    }
    let sim = image_embs.matmul(&caption_embs.transpose()?)?;
    Ok((recall_rows(&sim, ks, Direction::ImageToText), recall_rows(&sim.transpose()?, ks, Direction::TextToImage)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotResult {
    pub accuracy: f64,
    /// Per class: (accuracy, sample count).
    pub per_class: BTreeMap<usize, (f64, usize)>,
}

/// Normalised mean of template-filled caption embeddings per class.
/// Templates contain `{}` where the class name goes.
pub fn class_embeddings<T: Scalar>(
    params: &ParamSet<T>,
    config: &ModelConfig,
    tokenizer: &Tokenizer,
    classnames: &[String],
    templates: &[String],
) -> Result<Tensor<T>> {
    if templates.is_empty() {
        return Err(Error::Config("zero-shot classification needs at least one template".into()));
    }
    if classnames.is_empty() {
        return Err(Error::Config("zero-shot classification needs at least one class".into()));
    }
    let texts: Vec<String> = classnames.iter().flat_map(|c| templates.iter().map(move |t| t.replace("{}", c))).collect();
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    let emb = embed_texts(params, config, tokenizer, &refs)?;
    let d = emb.cols();
    let mut out = Vec::with_capacity(classnames.len() * d);
    for c in 0..classnames.len() {
        let mut mean = vec![0.0f64; d];
        for t in 0..templates.len() {
            for (m, &x) in mean.iter_mut().zip(emb.row(c * templates.len() + t)) {
                *m += x.as_f64();
            }
        }
        let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        out.extend(mean.iter().map(|x| T::lit(x / norm)));
    }
    Tensor::new(vec![classnames.len(), d], out)
}

/// Predicts the class with the highest cosine similarity for each image.
pub fn zero_shot_predict<T: Scalar>(image_embs: &Tensor<T>, class_embs: &Tensor<T>) -> Result<Vec<usize>> {
    check_pair(image_embs, class_embs)?;
    let sim = image_embs.matmul(&class_embs.transpose()?)?;
    Ok((0..sim.rows()).map(|i| argmax(sim.row(i))).collect())
}

pub fn zero_shot_score(predictions: &[usize], labels: &[usize]) -> Result<ZeroShotResult> {
    if predictions.len() != labels.len() || labels.is_empty() {
        return Err(dim_err!("{} predictions for {} labels", predictions.len(), labels.len()));
    }
    let mut per: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (&p, &l) in predictions.iter().zip(labels) {
        let e = per.entry(l).or_default();
        e.0 += usize::from(p == l);
        e.1 += 1;
    }
    let correct: usize = per.values().map(|c| c.0).sum();
    Ok(ZeroShotResult {
        accuracy: correct as f64 / labels.len() as f64,
        per_class: per.into_iter().map(|(k, (c, n))| (k, (c as f64 / n as f64, n))).collect(),
    })
}

/// Full zero-shot pipeline over one model's towers.
#[allow(clippy::too_many_arguments)]
pub fn zero_shot_classify<T: Scalar>(
    tower: &VisionTower<T>,
    vision_params: &ParamSet<T>,
    text_params: &ParamSet<T>,
    config: &ModelConfig,
    tokenizer: &Tokenizer,
    classnames: &[String],
    templates: &[String],
    images: &[&Image],
    labels: &[usize],
) -> Result<ZeroShotResult> {
    let classes = class_embeddings(text_params, config, tokenizer, classnames, templates)?;
    let imgs = embed_images(tower, vision_params, images)?;
    zero_shot_score(&zero_shot_predict(&imgs, &classes)?, labels)
}

pub fn normalize_answer(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Fraction of predictions equal to their answer after trimming and case folding.
pub fn vqa_exact_match(predictions: &[String], answers: &[String]) -> Result<f64> {
    if predictions.len() != answers.len() {
        return Err(dim_err!("{} predictions for {} answers", predictions.len(), answers.len()));
    }
    if answers.is_empty() {
        return Ok(0.0);
    }
    let hits = predictions.iter().zip(answers).filter(|(p, a)| normalize_answer(p) == normalize_answer(a)).count();
    Ok(hits as f64 / answers.len() as f64)
}

/// One metric line of an evaluation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub metric: String,
    pub value: f64,
    pub dataset: String,
    pub checkpoint_hash: String,
}

pub fn write_report<W: Write>(mut out: W, entries: &[ReportEntry]) -> Result<()> {
    for e in entries {
        let line = serde_json::to_string(e).map_err(|e| Error::Data(format!("report encode: {e}")))?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn render_table(entries: &[ReportEntry]) -> String {
    let w_metric = entries.iter().map(|e| e.metric.len()).max().unwrap_or(0).max("metric".len());
    let w_data = entries.iter().map(|e| e.dataset.len()).max().unwrap_or(0).max("dataset".len());
    let mut s = format!("{:<w_metric$}  {:<w_data$}  {:>8}  checkpoint\n", "metric", "dataset", "value");
    for e in entries {
        let hash = &e.checkpoint_hash[..e.checkpoint_hash.len().min(12)];
        s.push_str(&format!("{:<w_metric$}  {:<w_data$}  {:>8.4}  {hash}\n", e.metric, e.dataset, e.value));
    }
    s
}
