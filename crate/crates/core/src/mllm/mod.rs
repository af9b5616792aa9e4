//! Multimodal harness: a projector into a tiny causal LM, frozen-encoder and
//! full-finetune regimes, any-resolution tiling and instruction stages.

pub mod anyres;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use anyres::{select_grid, tile, AnyResGrid, GridLimits, DEFAULT_ALLOWED, DEFAULT_BASE};

use crate::data::{probe_questions, resize, stack_images, CaptionedImage, Image, Sample};
use crate::error::{Error, Result};
use crate::model::layers::{self, block_forward, block_name, init_block, Init, SeqLayout};
use crate::model::{
    init_projector, projector_forward, Checkpoint, CheckpointHeader, ProjectorConfig, Tokenizer, TokenizerSpec, VisionConfig, VisionTower,
    PROJECTOR_PREFIX, VISION_PREFIX,
};
use crate::numerics::{Graph, ParamSet, Scalar, Tensor, Var};
use crate::train::{lr_at, AdamW, LrMultipliers, OptimConfig, StageSchedule};

pub const LM_PREFIX: &str = "lm/";
pub const MAX_LM_PARAMS: usize = 1_000_000;
pub const VQA_PROMPT_CAPTION: &str = "describe the image briefly";

/// Decoder-only language model shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    #[serde(default)]
    pub tokenizer: TokenizerSpec,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    #[serde(default)]
    pub mlp_dim: Option<usize>,
    #[serde(default = "default_lm_context")]
    pub context: usize,
}

fn default_lm_context() -> usize {
    128
}

impl LmConfig {
    pub fn micro(tokenizer: TokenizerSpec) -> Self {
        LmConfig { tokenizer, width: 64, layers: 2, heads: 2, mlp_dim: None, context: 128 }
    }

    pub fn mlp(&self) -> usize {
        self.mlp_dim.unwrap_or(4 * self.width)
    }

    pub fn param_count(&self, vocab: usize) -> usize {
        let d = self.width;
        vocab * d + self.context * d + self.layers * layers::block_param_count(d, self.mlp(), None) + 2 * d + d * vocab + vocab
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            errs.push(format!("lm.width {} must be a positive multiple of lm.heads {}", self.width, self.heads));
        }
        if self.layers == 0 {
            errs.push("lm.layers must be positive".into());
        }
        if self.context == 0 {
            errs.push("lm.context must be positive".into());
        }
        if errs.is_empty() {
            let vocab = Tokenizer::from_spec(&self.tokenizer)?.vocab_size();
            let n = self.param_count(vocab);
            if n > MAX_LM_PARAMS {
                errs.push(format!("language model has {n} parameters, above {MAX_LM_PARAMS}"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnyResSettings {
    pub base: usize,
    #[serde(default = "default_allowed")]
    pub allowed: Vec<(usize, usize)>,
}

fn default_allowed() -> Vec<(usize, usize)> {
    DEFAULT_ALLOWED.to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmConfig {
    pub lm: LmConfig,
    /// Projector hidden width; defaults to the LM width.
    #[serde(default)]
    pub projector_hidden: Option<usize>,
    /// Tile inputs with the any-resolution scheme; a single resized crop otherwise.
    #[serde(default)]
    pub anyres: Option<AnyResSettings>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuneKind {
    FrozenEncoder,
    FullFinetune,
}

/// Tuning regime with per-component learning-rate multipliers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneMode {
    pub kind: TuneKind,
    pub multipliers: LrMultipliers,
}

/// Encoder multiplier under full finetuning.
pub const FULL_ENCODER_MULTIPLIER: f64 = 0.1;

impl TuneMode {
    pub fn frozen() -> Self {
        TuneMode { kind: TuneKind::FrozenEncoder, multipliers: LrMultipliers(vec![(VISION_PREFIX.into(), 0.0)]) }
    }

    pub fn full() -> Self {
        TuneMode { kind: TuneKind::FullFinetune, multipliers: LrMultipliers(vec![(VISION_PREFIX.into(), FULL_ENCODER_MULTIPLIER)]) }
    }

    pub fn from_kind(kind: TuneKind) -> Self {
        match kind {
            TuneKind::FrozenEncoder => Self::frozen(),
            TuneKind::FullFinetune => Self::full(),
        }
    }

    /// Frozen mode must give every vision parameter a zero multiplier.
    pub fn check(&self, params: &ParamSet<impl Scalar>) -> Result<()> {
        if self.kind == TuneKind::FrozenEncoder {
            if let Some(n) = params.names().find(|n| n.starts_with(VISION_PREFIX) && self.multipliers.get(n) != 0.0) {
                return Err(Error::Config(format!("frozen_encoder mode gives {n} a nonzero learning rate")));
            }
        }
        Ok(())
    }
}

/// One question about an image of a [`VqaDataset`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VqaSample {
    pub image: usize,
    pub question: String,
    pub answer: String,
}

#[derive(Clone, Debug, Default)]
pub struct VqaDataset {
    pub images: Vec<Image>,
    pub samples: Vec<VqaSample>,
}

#[derive(Deserialize)]
struct VqaLine {
    image: String,
    question: String,
    answer: String,
}

impl VqaDataset {
    /// Color and shape questions for every single-shape probe record.
    pub fn from_probe(records: &[CaptionedImage]) -> Result<Self> {
        let mut ds = VqaDataset::default();
        for rec in records {
            let Some(meta) = &rec.meta else { continue };
            let qs = probe_questions(meta);
            if qs.is_empty() {
                continue;
            }
            ds.images.push(Sample::decode(rec)?.image);
            let image = ds.images.len() - 1;
            ds.samples.extend(qs.into_iter().map(|q| VqaSample { image, question: q.question, answer: q.answer }));
        }
        if ds.samples.is_empty() {
            return Err(Error::Data("no single-shape probe records to ask about".into()));
        }
        Ok(ds)
    }

    /// Caption-as-answer samples, used for alignment stages.
    pub fn captions(records: &[CaptionedImage], synthetic: bool) -> Result<Self> {
        let mut ds = VqaDataset::default();
        for rec in records {
            let answer = if synthetic { &rec.caption_synthetic } else { &rec.caption_original };
            if answer.is_empty() {
                return Err(Error::Data(format!("record {} has no caption for this stage", rec.id)));
            }
            ds.images.push(Sample::decode(rec)?.image);
            ds.samples.push(VqaSample { image: ds.images.len() - 1, question: VQA_PROMPT_CAPTION.into(), answer: answer.clone() });
        }
        Ok(ds)
    }

    /// Reads JSON lines `{"image": path, "question": …, "answer": …}`;
    /// relative image paths resolve against the file's directory.
    pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let dir = path.parent().unwrap_or(Path::new("."));
        let mut ds = VqaDataset::default();
        let mut index = std::collections::BTreeMap::new();
        for (i, line) in std::fs::read_to_string(path)?.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let l: VqaLine = serde_json::from_str(line).map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
            let image = match index.get(&l.image) {
                Some(&k) => k,
                None => {
                    let img = Image::from_png(&std::fs::read(dir.join(&l.image))?)?;
                    ds.images.push(img);
                    index.insert(l.image.clone(), ds.images.len() - 1);
                    ds.images.len() - 1
                }
            };
            ds.samples.push(VqaSample { image, question: l.question, answer: l.answer });
        }
        if ds.samples.is_empty() {
            return Err(Error::Data(format!("{} has no samples", path.display())));
        }
        Ok(ds)
    }
}

/// One instruction-tuning stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstructionStage {
    pub name: String,
    pub steps: usize,
    pub batch: usize,
    pub base_lr: f64,
    #[serde(default)]
    pub warmup_steps: usize,
    /// Drop visual tokens (language-only pretraining of the LM).
    #[serde(default)]
    pub text_only: bool,
    /// Dataset reference, resolved by the caller.
    #[serde(default)]
    pub data: String,
}

impl InstructionStage {
    fn schedule(&self, resolution: usize) -> StageSchedule {
        StageSchedule {
            resolution,
            samples: self.steps * self.batch,
            batch: self.batch,
            base_lr: self.base_lr,
            warmup_samples: Some(self.warmup_steps * self.batch),
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.steps == 0 || self.batch == 0 {
            errs.push(format!("stage {}: steps and batch must be positive", self.name));
        }
        if self.warmup_steps >= self.steps.max(1) {
            errs.push(format!("stage {}: warmup_steps must be below steps", self.name));
        }
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            errs.push(format!("stage {}: base_lr must be finite and non-negative", self.name));
        }
        errs
    }
}

/// Three stages: projector alignment on captions, joint pretraining on
/// captions, then instruction tuning on questions.
pub fn three_stage_protocol(steps: usize, batch: usize) -> Vec<InstructionStage> {
    let stage = |name: &str, lr: f64, data: &str| InstructionStage {
        name: name.into(),
        steps,
        batch,
        base_lr: lr,
        warmup_steps: steps / 20,
        text_only: false,
        data: data.into(),
    };
    vec![stage("align", 1e-3, "probe-captions"), stage("vl-pretrain", 5e-4, "probe-captions"), stage("sft", 5e-4, "probe-vqa")]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub seed: u64,
    pub optim: OptimConfig,
    pub max_answer_tokens: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig { seed: 0, optim: OptimConfig { weight_decay: 0.0, ..OptimConfig::default() }, max_answer_tokens: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub stage: usize,
    pub stage_name: String,
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Serialize, Deserialize)]
struct LmHeader {
    kind: String,
    lm: LmConfig,
}

/// Embedding sequence and the positions that predict answer tokens.
#[derive(Clone, Debug)]
pub struct MmSequence {
    pub embeds: Var,
    /// Position `i` predicts token `i + 1`; `Some` only where that is an answer token.
    pub targets: Vec<Option<usize>>,
}

impl MmSequence {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn mask(&self) -> Vec<bool> {
        self.targets.iter().map(Option::is_some).collect()
    }
}

/// Orders `[visual][prompt][answer]` into one embedding sequence; only the
/// positions that predict answer tokens carry a loss target.
pub fn build_mm_sequence<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamSet<T>,
    lm: &LmConfig,
    visual: Option<Var>,
    prompt_ids: &[usize],
    answer_ids: &[usize],
) -> Result<MmSequence> {
    let tv = visual.map_or(0, |v| g.value(v).rows());
    if let Some(v) = visual {
        if g.value(v).cols() != lm.width {
            return Err(Error::Dimension(format!("visual tokens have width {}, LM expects {}", g.value(v).cols(), lm.width)));
        }
    }
    let len = tv + prompt_ids.len() + answer_ids.len();
    if len > lm.context {
        return Err(Error::ContextOverflow { length: len, context: lm.context });
    }
    if tv + prompt_ids.len() == 0 && !answer_ids.is_empty() {
        return Err(Error::Contract("an answer needs at least one preceding position".into()));
    }
    let mut parts = Vec::new();
    if let Some(v) = visual.filter(|_| tv > 0) {
        parts.push(v);
    }
    let text: Vec<usize> = prompt_ids.iter().chain(answer_ids).copied().collect();
    if !text.is_empty() {
        let table = g.param(p, "lm/tok_emb")?;
        parts.push(g.gather_rows(table, text)?);
    }
    if parts.is_empty() {
        return Err(Error::Contract("empty multimodal sequence".into()));
    }
    let embeds = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };
    let start = tv + prompt_ids.len();
    let targets = (0..len).map(|i| (i + 1 >= start && i + 1 < len).then(|| answer_ids[i + 1 - start])).collect();
    Ok(MmSequence { embeds, targets })
}

/// Vision tower, projector and language model.
#[derive(Clone, Debug)]
pub struct MmModel<T> {
    pub vision: VisionConfig,
    pub tower: VisionTower<T>,
    pub config: MmConfig,
    pub projector: ProjectorConfig,
    pub tokenizer: Tokenizer,
    /// `vision/`, `projector/` and `lm/` tensors.
    pub params: ParamSet<T>,
}

impl<T: Scalar> MmModel<T> {
    /// Builds on a pretrained vision checkpoint (vision-only or full); the
    /// projector and LM start fresh.
    pub fn from_vision_checkpoint(ck: &Checkpoint, config: MmConfig, seed: u64) -> Result<Self> {
        config.lm.validate()?;
        let header = CheckpointHeader::parse(&ck.header)?;
        let mut vision = header.model.vision;
        if let Some(a) = &config.anyres {
            anyres::validate_allowed(&a.allowed, GridLimits::default())?;
            vision.resolution = a.base;
        }
        let tower = VisionTower::new(vision.clone())?;
        let mut params: ParamSet<T> = ck.params.cast().with_prefixes(&[VISION_PREFIX]);
        if params.is_empty() {
            return Err(Error::Checkpoint("checkpoint has no vision/ tensors".into()));
        }
        let projector = ProjectorConfig {
            in_width: vision.width,
            hidden: config.projector_hidden.unwrap_or(config.lm.width),
            out_width: config.lm.width,
            activation: Default::default(),
        };
        let tokenizer = Tokenizer::from_spec(&config.lm.tokenizer)?;
        let mut init = Init::new(seed, 0.02);
        init_projector(&mut init, &mut params, &projector)?;
        init_lm(&mut init, &mut params, &config.lm, tokenizer.vocab_size())?;
        Ok(MmModel { vision, tower, config, projector, tokenizer, params })
    }

    /// Loads from a vision checkpoint file; a missing file is a config error.
    pub fn from_vision_file(path: impl AsRef<Path>, config: MmConfig, seed: u64) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::Config(format!("vision checkpoint {} does not exist", path.display())));
        }
        Self::from_vision_checkpoint(&Checkpoint::load(path)?, config, seed)
    }

    pub fn lm_checkpoint(&self) -> Result<Checkpoint> {
        let header = LmHeader { kind: "lm".into(), lm: self.config.lm.clone() };
        let header = toml::to_string(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(Checkpoint::new(header, &self.params.with_prefixes(&[LM_PREFIX])))
    }

    /// Replaces the LM weights with an imported container-format checkpoint.
    pub fn import_lm(&mut self, ck: &Checkpoint) -> Result<()> {
        let header: LmHeader = toml::from_str(&ck.header).map_err(|e| Error::Checkpoint(format!("lm header: {e}")))?;
        if header.kind != "lm" || header.lm != self.config.lm {
            return Err(Error::Checkpoint("language-model checkpoint does not match lm config".into()));
        }
        let lm: ParamSet<T> = ck.params.cast();
        for (name, t) in lm.iter() {
            let cur = self.params.get(name)?;
            if cur.shape() != t.shape() {
                return Err(Error::Checkpoint(format!("{name}: shape {:?} vs {:?}", t.shape(), cur.shape())));
            }
        }
        self.params.merge(&lm);
        Ok(())
    }

    pub fn vision_hash(&self) -> String {
        self.params.with_prefixes(&[VISION_PREFIX]).hash()
    }

    /// Base-resolution crops for one image.
    pub fn crops(&self, img: &Image) -> Result<Vec<Image>> {
        match &self.config.anyres {
            Some(a) => tile(img, &select_grid(img.height, img.width, a.base, &a.allowed)?),
            None => Ok(vec![resize(img, self.vision.resolution)?]),
        }
    }

    /// Patch tokens (class token dropped) of every crop, in the graph.
    fn vision_tokens(&self, g: &mut Graph<T>, crops: &[&Image]) -> Result<Var> {
        let out = self.tower.forward(g, &self.params, &stack_images(crops)?)?;
        let t = out.tokens_per_image;
        let np = self.vision.num_patches();
        let skip = t - np;
        let idx = (0..crops.len()).flat_map(|c| (skip..t).map(move |j| c * t + j)).collect();
        g.gather_rows(out.tokens, idx)
    }

    /// Eager patch tokens of an image's crops, `[crops·patches × width]`.
    pub fn image_features(&self, img: &Image) -> Result<Tensor<T>> {
        let crops = self.crops(img)?;
        let refs: Vec<&Image> = crops.iter().collect();
        let mut g = Graph::new();
        let v = self.vision_tokens(&mut g, &refs)?;
        Ok(g.value(v).clone())
    }

    fn prompt_ids(&self, question: &str) -> Result<Vec<usize>> {
        let mut ids = vec![self.tokenizer.bos_id()];
        ids.extend(self.tokenizer.encode(question)?);
        Ok(ids)
    }

    fn answer_ids(&self, answer: &str) -> Result<Vec<usize>> {
        let mut ids = self.tokenizer.encode(answer)?;
        ids.push(self.tokenizer.eos_id());
        Ok(ids)
    }

    /// Causal LM over padded `[B·L × width]` embeddings; returns logits.
    fn lm_logits(&self, g: &mut Graph<T>, seqs: &[MmSequence]) -> Result<(Var, usize)> {
        let cfg = &self.config.lm;
        let len = seqs.iter().map(MmSequence::len).max().unwrap_or(0);
        let mut rows = Vec::with_capacity(seqs.len());
        let table = g.param(&self.params, "lm/tok_emb")?;
        for s in seqs {
            if s.len() < len {
                let pad = g.gather_rows(table, vec![self.tokenizer.pad_id(); len - s.len()])?;
                rows.push(g.concat_rows(&[s.embeds, pad])?);
            } else {
                rows.push(s.embeds);
            }
        }
        let x = if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows)? };
        let mut x = layers::add_positions(g, &self.params, "lm/pos_emb", x, len)?;
        let layout = SeqLayout { batch: seqs.len(), len, key_lens: None };
        for i in 0..cfg.layers {
            x = block_forward(g, &self.params, &block_name("lm", i), x, cfg.heads, &layout, true, None)?;
        }
        let x = layers::norm(g, &self.params, "lm/ln_final", x)?;
        Ok((layers::linear(g, &self.params, "lm/head", x)?, len))
    }

    /// Mean answer-token cross-entropy of a batch. `features` holds cached
    /// vision tokens per image (frozen regime); otherwise the tower runs in
    /// the graph.
    pub fn batch_loss(
        &self,
        g: &mut Graph<T>,
        data: &VqaDataset,
        picks: &[usize],
        features: Option<&[Tensor<T>]>,
        text_only: bool,
    ) -> Result<Var> {
        let visual: Vec<Option<Var>> = if text_only {
            vec![None; picks.len()]
        } else if let Some(f) = features {
            let mut out = Vec::with_capacity(picks.len());
            for &i in picks {
                let c = g.constant(f[data.samples[i].image].clone());
                out.push(Some(projector_forward(g, &self.params, &self.projector, c)?));
            }
            out
        } else {
            let crops: Vec<Vec<Image>> = picks.iter().map(|&i| self.crops(&data.images[data.samples[i].image])).collect::<Result<_>>()?;
            let per = crops[0].len();
            if crops.iter().any(|c| c.len() != per) {
                return Err(Error::Data("batch mixes images with different tile grids".into()));
            }
            let refs: Vec<&Image> = crops.iter().flatten().collect();
            let tokens = self.vision_tokens(g, &refs)?;
            let proj = projector_forward(g, &self.params, &self.projector, tokens)?;
            let tv = per * self.vision.num_patches();
            let mut out = Vec::with_capacity(picks.len());
            for b in 0..picks.len() {
                out.push(Some(g.gather_rows(proj, (b * tv..(b + 1) * tv).collect())?));
            }
            out
        };
        let mut seqs = Vec::with_capacity(picks.len());
        for (&i, v) in picks.iter().zip(visual) {
            let s = &data.samples[i];
            let prompt = self.prompt_ids(&s.question)?;
            let answer = self.answer_ids(&s.answer)?;
            seqs.push(build_mm_sequence(g, &self.params, &self.config.lm, v, &prompt, &answer)?);
        }
        let (logits, len) = self.lm_logits(g, &seqs)?;
        let targets = seqs.iter().flat_map(|s| s.targets.iter().copied().chain(std::iter::repeat_n(None, len - s.len()))).collect();
        Ok(g.cross_entropy(logits, targets)?.0)
    }

    /// Greedy decoding of an answer; stops at end-of-sequence.
    pub fn answer(&self, features: Option<&Tensor<T>>, question: &str, max_tokens: usize) -> Result<String> {
        let prompt = self.prompt_ids(question)?;
        let mut generated: Vec<usize> = Vec::new();
        for _ in 0..max_tokens {
            let mut g = Graph::new();
            let visual = match features {
                Some(f) => {
                    let c = g.constant(f.clone());
                    Some(projector_forward(&mut g, &self.params, &self.projector, c)?)
                }
                None => None,
            };
            let mut ids = prompt.clone();
            ids.extend(&generated);
            let seq = build_mm_sequence(&mut g, &self.params, &self.config.lm, visual, &ids, &[])?;
            let last = seq.len() - 1;
            let (logits, _) = self.lm_logits(&mut g, &[seq])?;
            let next = crate::eval::argmax(g.value(logits).row(last));
            if next == self.tokenizer.eos_id() || next == self.tokenizer.pad_id() {
                break;
            }
            generated.push(next);
        }
        Ok(self.tokenizer.decode(&generated))
    }

    /// Greedy answers for every sample of a dataset.
    pub fn predict(&self, data: &VqaDataset, max_tokens: usize) -> Result<Vec<String>> {
        let feats = data.images.iter().map(|img| self.image_features(img)).collect::<Result<Vec<_>>>()?;
        data.samples.iter().map(|s| self.answer(Some(&feats[s.image]), &s.question, max_tokens)).collect()
    }
}

pub fn init_lm<T: Scalar>(init: &mut Init, p: &mut ParamSet<T>, cfg: &LmConfig, vocab: usize) -> Result<()> {
    p.insert("lm/tok_emb", init.trunc_normal(&[vocab, cfg.width]))?;
    init.positions(p, "lm/pos_emb", cfg.context, cfg.width)?;
    for i in 0..cfg.layers {
        init_block(init, p, &block_name("lm", i), cfg.width, cfg.mlp(), None)?;
    }
    init.norm(p, "lm/ln_final", cfg.width)?;
    init.linear(p, "lm/head", cfg.width, vocab, true)
}

/// Runs the instruction stages in order, one dataset per stage.
pub fn finetune<T: Scalar>(
    model: &mut MmModel<T>,
    mode: &TuneMode,
    stages: &[InstructionStage],
    data: &[&VqaDataset],
    cfg: &FinetuneConfig,
) -> Result<Vec<FinetuneRecord>> {
    if stages.is_empty() || stages.len() != data.len() {
        return Err(Error::Config(format!("{} stages need as many datasets, got {}", stages.len(), data.len())));
    }
    let errs: Vec<String> = stages.iter().flat_map(InstructionStage::problems).chain(cfg.optim.problems()).collect();
    if !errs.is_empty() {
        return Err(Error::Validation(errs));
    }
    mode.check(&model.params)?;
    let frozen = mode.multipliers.frozen_prefixes();
    let mut optim = AdamW::new(cfg.optim.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::new();
    let mut step = 0u64;
    for (si, (stage, ds)) in stages.iter().zip(data).enumerate() {
        if ds.samples.is_empty() {
            return Err(Error::Data(format!("stage {} has no samples", stage.name)));
        }
        let features = if mode.kind == TuneKind::FrozenEncoder && !stage.text_only {
            Some(ds.images.iter().map(|img| model.image_features(img)).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        let sched = stage.schedule(model.vision.resolution);
        let mut order: Vec<usize> = Vec::new();
        for k in 0..stage.steps {
            let mut picks = Vec::with_capacity(stage.batch);
            while picks.len() < stage.batch {
                if order.is_empty() {
                    order = (0..ds.samples.len()).collect();
                    order.shuffle(&mut rng);
                }
                picks.push(order.pop().expect("refilled above"));
            }
            let mut g = Graph::new();
            g.freeze_prefixes(&frozen);
            let loss = model.batch_loss(&mut g, ds, &picks, features.as_deref(), stage.text_only)?;
            let value = g.value(loss).item().as_f64();
            if !value.is_finite() {
                return Err(Error::Numeric(format!("finetune loss is {value} at step {step}")));
            }
            let grads = g.backward(loss)?.params();
            let lr = lr_at(&sched, (k + 1) * stage.batch)?;
            optim.step(&mut model.params, &grads, lr, &mode.multipliers)?;
            step += 1;
            log.push(FinetuneRecord { stage: si, stage_name: stage.name.clone(), step, lr, loss: value });
        }
    }
    Ok(log)
}

/// Keeps `PROJECTOR_PREFIX` reachable for callers selecting projector tensors.
pub fn projector_params<T: Scalar>(p: &ParamSet<T>) -> ParamSet<T> {
    p.with_prefixes(&[PROJECTOR_PREFIX])
}
