use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the vision tower reduces its token sequence to one embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    #[default]
    ClsToken,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisionConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    /// Hidden size of the block MLP; `4·width` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mlp_dim: Option<usize>,
    pub patch: usize,
    pub resolution: usize,
    #[serde(default)]
    pub pool: Pool,
}

/// Named encoder sizes: `(name, layers, width, heads, mlp_dim, published size in millions)`.
pub const VISION_PRESETS: [(&str, usize, usize, usize, usize, f64); 6] = [
    ("tiny", 12, 192, 3, 768, 5.0),
    ("small", 12, 384, 6, 1536, 22.0),
    ("base", 12, 768, 12, 3072, 86.0),
    ("large", 24, 1024, 16, 4096, 303.0),
    ("so400m", 27, 1152, 16, 4304, 412.0),
    ("huge", 32, 1280, 16, 5120, 631.0),
];

pub const ALLOWED_PATCHES: [usize; 3] = [8, 14, 16];

impl VisionConfig {
    pub fn preset(name: &str, patch: usize, resolution: usize) -> Result<Self> {
        let (_, layers, width, heads, mlp, _) =
            VISION_PRESETS.iter().find(|p| p.0 == name).ok_or_else(|| Error::Config(format!("unknown vision preset {name:?}")))?;
        let cfg =
            VisionConfig { layers: *layers, width: *width, heads: *heads, mlp_dim: Some(*mlp), patch, resolution, pool: Pool::ClsToken };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Two-layer, width-32 tower for tests and desk experiments.
    pub fn micro(patch: usize, resolution: usize) -> Self {
        VisionConfig { layers: 2, width: 32, heads: 2, mlp_dim: None, patch, resolution, pool: Pool::ClsToken }
    }

    pub fn mlp(&self) -> usize {
        self.mlp_dim.unwrap_or(4 * self.width)
    }

    pub fn grid(&self) -> usize {
        self.resolution / self.patch
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Tokens emitted per image, including the class token when pooling on it.
    pub fn tokens_per_image(&self) -> usize {
        self.num_patches() + usize::from(self.pool == Pool::ClsToken)
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.layers == 0 {
            errs.push("vision.layers must be >= 1".to_string());
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            errs.push(format!("vision.width {} not divisible by heads {}", self.width, self.heads));
        }
        if !self.width.is_multiple_of(4) {
            errs.push(format!("vision.width {} must be divisible by 4 for 2-D sincos embeddings", self.width));
        }
        if !ALLOWED_PATCHES.contains(&self.patch) {
            errs.push(format!("vision.patch {} not in {ALLOWED_PATCHES:?}", self.patch));
        } else if self.resolution == 0 || !self.resolution.is_multiple_of(self.patch) {
            errs.push(format!("vision.resolution {} not divisible by patch {}", self.resolution, self.patch));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextConfig {
    pub vocab_size: usize,
    #[serde(default = "default_encoder_context")]
    pub encoder_context: usize,
    #[serde(default = "default_decoder_context")]
    pub decoder_context: usize,
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mlp_dim: Option<usize>,
    pub decoder_layers: usize,
}

fn default_encoder_context() -> usize {
    80
}

fn default_decoder_context() -> usize {
    128
}

impl TextConfig {
    pub fn micro(vocab_size: usize) -> Self {
        TextConfig {
            vocab_size,
            encoder_context: 80,
            decoder_context: 128,
            layers: 2,
            width: 32,
            heads: 2,
            mlp_dim: None,
            decoder_layers: 2,
        }
    }

    pub fn mlp(&self) -> usize {
        self.mlp_dim.unwrap_or(4 * self.width)
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.encoder_context == 0 || self.decoder_context == 0 {
            errs.push("text contexts must be >= 1".to_string());
        }
        if self.vocab_size == 0 {
            errs.push("text.vocab_size must be >= 1".to_string());
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            errs.push(format!("text.width {} not divisible by heads {}", self.width, self.heads));
        }
        if !self.width.is_multiple_of(2) {
            errs.push("text.width must be even for sincos embeddings".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Gelu,
    Identity,
}

/// Two-layer MLP mapping vision tokens to a language-model width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectorConfig {
    pub in_width: usize,
    pub hidden: usize,
    pub out_width: usize,
    #[serde(default)]
    pub activation: Activation,
}

/// Which vocabulary the text side uses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TokenizerSpec {
    /// 256 byte values plus pad, bos and eos.
    #[default]
    Bytes,
    /// The closed word vocabulary of the synthetic probe data.
    ProbeWords,
    /// Whitespace-separated words, one per line, from a file.
    WordFile { path: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vision: VisionConfig,
    pub text: TextConfig,
    pub embed_dim: usize,
    #[serde(default)]
    pub tokenizer: TokenizerSpec,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_init_std() -> f64 {
    0.02
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        for r in [self.vision.validate(), self.text.validate()] {
            match r {
                Err(Error::Validation(e)) => errs.extend(e),
                Err(e) => errs.push(e.to_string()),
                Ok(()) => {}
            }
        }
        if self.embed_dim == 0 {
            errs.push("embed_dim must be >= 1".to_string());
        }
        if !(self.init_std > 0.0) {
            errs.push("init_std must be positive".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }
}
