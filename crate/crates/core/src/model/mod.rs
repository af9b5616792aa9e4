//! Architecture family: vision tower, text encoder, caption decoder and
//! projector, all built from configs.

mod checkpoint;
pub mod config;
pub mod layers;
pub mod pe;
pub mod projector;
pub mod text;
pub mod tokenizer;
pub mod vision;

use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{Activation, ModelConfig, Pool, ProjectorConfig, TextConfig, TokenizerSpec, VisionConfig, VISION_PRESETS};
pub use pe::{patchify, patchify_batch, sincos_1d, sincos_2d};
pub use projector::{identity_projector, init_projector, project_tokens, projector_forward, PROJECTOR_PREFIX};
pub use text::{caption_decode_loss, text_forward, CaptionLoss, TextOut, DECODER_PREFIX, TEXT_PREFIX};
pub use tokenizer::{TokenBatch, Tokenizer};
pub use vision::{vision_embed, vision_forward, vision_param_count, VisionOut, VisionTower, VISION_PREFIX};

use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Scalar, Tensor};
use layers::Init;

/// Name of the learnable log inverse-temperature.
pub const LOGIT_SCALE: &str = "logit_scale";
/// `ln(1/0.07)`.
pub const LOGIT_SCALE_INIT: f64 = 2.659_260_036_932_778_4;
/// `ln(100)`: the temperature never drops below 1/100.
pub const LOGIT_SCALE_MAX: f64 = 4.605_170_185_988_091;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Full,
    Vision,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: CheckpointKind,
    pub model: ModelConfig,
}

impl CheckpointHeader {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))
    }

    pub fn render(&self) -> String {
        toml::to_string(self).expect("header serialises")
    }
}

/// Complete two-tower model with its caption decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<T> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
}

impl<T: Scalar> ModelWeights<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let tok = Tokenizer::from_spec(&config.tokenizer)?;
        if tok.vocab_size() != config.text.vocab_size {
            return Err(Error::Config(format!(
                "text.vocab_size {} does not match tokenizer vocabulary {}",
                config.text.vocab_size,
                tok.vocab_size()
            )));
        }
        let mut init = Init::new(seed, config.init_std);
        let mut params = ParamSet::new();
        vision::init_vision(&mut init, &mut params, &config.vision, config.embed_dim)?;
        text::init_text_encoder(&mut init, &mut params, &config.text, config.embed_dim)?;
        text::init_decoder(&mut init, &mut params, &config.text, config.vision.width)?;
        params.insert(LOGIT_SCALE, Tensor::scalar(T::lit(LOGIT_SCALE_INIT)))?;
        Ok(ModelWeights { config, params })
    }

    pub fn tokenizer(&self) -> Result<Tokenizer> {
        Tokenizer::from_spec(&self.config.tokenizer)
    }

    pub fn vision_tower(&self) -> Result<VisionTower<T>> {
        VisionTower::new(self.config.vision.clone())
    }

    pub fn vision_params(&self) -> ParamSet<T> {
        self.params.with_prefixes(&[VISION_PREFIX])
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let header = CheckpointHeader { kind: CheckpointKind::Full, model: self.config.clone() };
        Checkpoint::new(header.render(), &self.params)
    }

    /// Checkpoint holding only `vision/` tensors.
    pub fn to_vision_checkpoint(&self) -> Checkpoint {
        let header = CheckpointHeader { kind: CheckpointKind::Vision, model: self.config.clone() };
        Checkpoint::new(header.render(), &self.vision_params())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let header = CheckpointHeader::parse(&ck.header)?;
        if header.kind != CheckpointKind::Full {
            return Err(Error::Checkpoint("expected a full-model checkpoint".into()));
        }
        Ok(ModelWeights { config: header.model, params: ck.params.cast() })
    }
}

/// A reloaded vision backbone (text tower and decoder discarded).
#[derive(Clone, Debug)]
pub struct VisionBackbone<T> {
    pub config: ModelConfig,
    pub tower: VisionTower<T>,
    pub params: ParamSet<T>,
}

impl<T: Scalar> VisionBackbone<T> {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let header = CheckpointHeader::parse(&ck.header)?;
        let params: ParamSet<T> = ck.params.cast().with_prefixes(&[VISION_PREFIX]);
        let tower = VisionTower::new(header.model.vision.clone())?;
        Ok(VisionBackbone { config: header.model, tower, params })
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// `(pooled, tokens)` for a batch at the checkpoint's resolution.
    pub fn forward(&self, images: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        vision_forward(&self.tower, &self.params, images)
    }
}

impl ModelConfig {
    /// Width-32, two-layer towers over the given tokenizer.
    pub fn micro(patch: usize, resolution: usize, tokenizer: TokenizerSpec) -> Result<Self> {
        let vocab = Tokenizer::from_spec(&tokenizer)?.vocab_size();
        Ok(ModelConfig {
            vision: VisionConfig::micro(patch, resolution),
            text: TextConfig::micro(vocab),
            embed_dim: 32,
            tokenizer,
            init_std: 0.02,
        })
    }
}
