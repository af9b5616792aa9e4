//! Run configuration: TOML file, `key=value` overrides, presets and
//! whole-config validation.
//!
//! Precedence, lowest to highest: built-in defaults, the config file, the
//! `VISENC_OUTPUT_DIR` environment variable (output directory only), then
//! `--set` overrides in command-line order (last wins).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::ProbeMode;
use crate::error::{Error, Result};
use crate::mllm::{three_stage_protocol, AnyResSettings, InstructionStage, LmConfig, MmConfig, TuneKind};
use crate::model::{ModelConfig, TextConfig, Tokenizer, TokenizerSpec, VisionConfig};
use crate::objectives::{CaptionSource, Toggles};
use crate::train::{budget_variants, desk_curriculum, validate_stages, OptimConfig, StageSchedule, TrainConfig};

pub const OUTPUT_DIR_ENV: &str = "VISENC_OUTPUT_DIR";

/// Model shape: a named preset, optionally replaced tower by tower.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    /// `micro` or a vision preset name (`tiny`, `small`, `base`, …).
    pub preset: String,
    pub patch: usize,
    pub resolution: usize,
    pub embed_dim: usize,
    pub tokenizer: TokenizerSpec,
    pub init_std: f64,
    /// Width of both micro towers when set.
    pub width: Option<usize>,
    pub vision: Option<VisionConfig>,
    pub text: Option<TextConfig>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            preset: "micro".into(),
            patch: 16,
            resolution: 64,
            embed_dim: 32,
            tokenizer: TokenizerSpec::ProbeWords,
            init_std: 0.02,
            width: None,
            vision: None,
            text: None,
        }
    }
}

impl ModelSection {
    pub fn resolve(&self) -> Result<ModelConfig> {
        let vocab = Tokenizer::from_spec(&self.tokenizer)?.vocab_size();
        let vision = match &self.vision {
            Some(v) => v.clone(),
            None if self.preset == "micro" => {
                VisionConfig { width: self.width.unwrap_or(32), ..VisionConfig::micro(self.patch, self.resolution) }
            }
            None => VisionConfig::preset(&self.preset, self.patch, self.resolution)?,
        };
        let text = match &self.text {
            Some(t) => t.clone(),
            None if self.preset == "micro" => TextConfig { width: self.width.unwrap_or(32), ..TextConfig::micro(vocab) },
            None => TextConfig { width: vision.width.min(512), heads: 8, layers: 12, ..TextConfig::micro(vocab) },
        };
        let cfg = ModelConfig { vision, text, embed_dim: self.embed_dim, tokenizer: self.tokenizer.clone(), init_std: self.init_std };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Where training records come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    /// Shard files, read in order. When empty, probe data is generated.
    pub shards: Vec<PathBuf>,
    pub probe_seed: u64,
    pub probe_records: usize,
    pub probe_resolution: usize,
    pub probe_mode: ProbeMode,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { shards: Vec::new(), probe_seed: 7, probe_records: 256, probe_resolution: 128, probe_mode: ProbeMode::Mixed }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneSection {
    pub mode: TuneKind,
    /// Exported vision checkpoint; defaults to `<output_dir>/vision.ovck`.
    pub vision_checkpoint: Option<PathBuf>,
    /// Optional language-model weights in the checkpoint container format.
    pub lm_checkpoint: Option<PathBuf>,
    pub encoder_multiplier: f64,
    pub lm: LmConfig,
    pub projector_hidden: Option<usize>,
    pub anyres: Option<AnyResSettings>,
    pub stages: Vec<InstructionStage>,
    pub probe_images: usize,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        FinetuneSection {
            mode: TuneKind::FrozenEncoder,
            vision_checkpoint: None,
            lm_checkpoint: None,
            encoder_multiplier: crate::mllm::FULL_ENCODER_MULTIPLIER,
            lm: LmConfig::micro(TokenizerSpec::ProbeWords),
            projector_hidden: None,
            anyres: None,
            stages: three_stage_protocol(100, 16),
            probe_images: 72,
        }
    }
}

impl FinetuneSection {
    pub fn mm_config(&self) -> MmConfig {
        MmConfig { lm: self.lm.clone(), projector_hidden: self.projector_hidden, anyres: self.anyres.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    /// Full-model checkpoint; defaults to `<output_dir>/final.ovck`.
    pub checkpoint: Option<PathBuf>,
    /// Zero-shot prompt templates, `{}` marks the class name.
    pub templates: Vec<String>,
    pub ks: Vec<usize>,
    pub images: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { checkpoint: None, templates: vec!["{}".into(), "a {}".into()], ks: vec![1, 5, 10], images: 72 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradCheckSection {
    pub batch: usize,
    pub patch: usize,
    pub resolution: usize,
    pub init_std: f64,
    pub probes_per_tensor: usize,
    pub h: f64,
    pub tol: f64,
}

impl Default for GradCheckSection {
    fn default() -> Self {
        GradCheckSection { batch: 4, patch: 16, resolution: 32, init_std: 0.1, probes_per_tensor: 6, h: 1e-4, tol: 1e-3 }
    }
}

/// Everything a command needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Bit-exact replay mode: no wall-clock fields, single worker.
    pub strict: bool,
    pub workers: usize,
    pub model: ModelSection,
    pub stages: Vec<StageSchedule>,
    pub toggles: Toggles,
    pub optim: OptimConfig,
    pub data: DataSection,
    pub finetune: FinetuneSection,
    pub eval: EvalSection,
    pub gradcheck: GradCheckSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            strict: false,
            workers: 1,
            model: ModelSection::default(),
            stages: desk_curriculum(),
            toggles: Toggles::default(),
            optim: OptimConfig::default(),
            data: DataSection::default(),
            finetune: FinetuneSection::default(),
            eval: EvalSection::default(),
            gradcheck: GradCheckSection::default(),
        }
    }
}

/// Parses `key.path=value`; the value is read as a TOML literal and falls
/// back to a bare string.
pub fn parse_override(s: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, raw) = s.split_once('=').ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::Config(format!("override {s:?} has an empty key")));
    }
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_owned()));
    Ok((key.split('.').map(str::to_owned).collect(), value))
}

fn set_path(root: &mut toml::Value, path: &[String], value: toml::Value) -> Result<()> {
    let (head, rest) = path.split_first().expect("non-empty path");
    let slot = match root {
        toml::Value::Table(t) => {
            if rest.is_empty() {
                t.insert(head.clone(), value);
                return Ok(());
            }
            t.entry(head.clone()).or_insert_with(|| toml::Value::Table(Default::default()))
        }
        toml::Value::Array(a) => {
            let i: usize = head.parse().map_err(|_| Error::Config(format!("{head:?} is not an array index")))?;
            let len = a.len();
            let item = a.get_mut(i).ok_or_else(|| Error::Config(format!("index {i} outside array of {len}")))?;
            if rest.is_empty() {
                *item = value;
                return Ok(());
            }
            item
        }
        _ => return Err(Error::Config(format!("cannot set {head:?} inside a scalar"))),
    };
    set_path(slot, rest, value)
}

impl RunConfig {
    /// Deserialises a TOML table, reporting every unknown key at once.
    pub fn from_value(value: toml::Value) -> Result<Self> {
        let mut unknown = Vec::new();
        let cfg: RunConfig =
            serde_ignored::deserialize(value, |path| unknown.push(path.to_string())).map_err(|e| Error::Config(e.to_string()))?;
        if !unknown.is_empty() {
            return Err(Error::Validation(unknown.into_iter().map(|k| format!("unknown key {k}")).collect()));
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let value: toml::Value = toml::from_str(text).map_err(|e| Error::Config(format!("config syntax: {e}")))?;
        Self::from_value(value)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("config encode: {e}")))
    }

    /// Loads a config (or the defaults), applies the environment and
    /// overrides, then validates.
    pub fn load(path: Option<&Path>, preset: Option<&str>, overrides: &[String]) -> Result<Vec<(String, Self)>> {
        let base: Vec<(String, RunConfig)> = match (path, preset) {
            (Some(_), Some(_)) => return Err(Error::Config("give either a config file or a preset, not both".into())),
            (Some(p), None) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
                vec![("run".into(), Self::parse(&text)?)]
            }
            (None, Some(name)) => presets(name)?,
            (None, None) => vec![("run".into(), RunConfig::default())],
        };
        let env_dir = std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from);
        let multi = base.len() > 1;
        base.into_iter()
            .map(|(name, mut cfg)| {
                if let Some(d) = &env_dir {
                    cfg.output_dir = if multi { d.join(&name) } else { d.clone() };
                }
                let cfg = cfg.with_overrides(overrides)?;
                cfg.validate()?;
                Ok((name, cfg))
            })
            .collect()
    }

    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut value = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let (path, v) = parse_override(o)?;
            set_path(&mut value, &path, v)?;
        }
        Self::from_value(value)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            optim: self.optim.clone(),
            toggles: self.toggles,
            strict: self.strict,
            lr_multipliers: Default::default(),
        }
    }

    /// Every problem in the config, reported together.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut absorb = |r: Result<()>| match r {
            Ok(()) => {}
            Err(Error::Validation(v)) => errs.extend(v),
            Err(e) => errs.push(e.to_string()),
        };
        let model = self.model.resolve();
        absorb(model.as_ref().map(|_| ()).map_err(|e| Error::Config(e.to_string())));
        if let Ok(m) = &model {
            absorb(validate_stages(&self.stages, m.vision.patch));
        }
        absorb(problems(self.optim.problems()));
        if !(self.toggles.lambda_caption >= 0.0 && self.toggles.lambda_caption.is_finite()) {
            absorb(Err(Error::Config("toggles.lambda_caption must be finite and non-negative".into())));
        }
        if self.workers == 0 {
            absorb(Err(Error::Config("workers must be >= 1".into())));
        }
        if self.strict && self.workers != 1 {
            absorb(Err(Error::Config("strict mode requires workers = 1".into())));
        }
        if self.data.shards.is_empty() && (self.data.probe_records == 0 || self.data.probe_resolution < 8) {
            absorb(Err(Error::Config("data: probe_records must be >= 1 and probe_resolution >= 8".into())));
        }
        for p in self.data.shards.iter().filter(|p| !p.exists()) {
            absorb(Err(Error::Config(format!("data.shards: {} does not exist", p.display()))));
        }
        absorb(problems(self.finetune.stages.iter().flat_map(InstructionStage::problems).collect()));
        absorb(self.finetune.lm.validate());
        if !(self.finetune.encoder_multiplier >= 0.0) {
            absorb(Err(Error::Config("finetune.encoder_multiplier must be non-negative".into())));
        }
        if self.eval.templates.is_empty() {
            absorb(Err(Error::Config("eval.templates must not be empty".into())));
        }
        if self.eval.ks.contains(&0) {
            absorb(Err(Error::Config("eval.ks entries must be >= 1".into())));
        }
        if self.gradcheck.batch == 0 || !(self.gradcheck.h > 0.0) || !(self.gradcheck.tol > 0.0) {
            absorb(Err(Error::Config("gradcheck: batch, h and tol must be positive".into())));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }
}

fn problems(v: Vec<String>) -> Result<()> {
    if v.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(v))
    }
}

/// Names accepted by [`presets`].
pub const PRESET_NAMES: [&str; 9] = [
    "micro-overfit",
    "curriculum-desk",
    "budget-512-128",
    "budget-1024-256",
    "budget-512-512",
    "budget-0-768",
    "ablation-decoder-captions",
    "patch-8-vs-16",
    "tune-frozen-vs-full",
];

/// Expands a named experiment into one or more runs.
pub fn presets(name: &str) -> Result<Vec<(String, RunConfig)>> {
    let base = RunConfig::default();
    let dir = |run: &str| PathBuf::from("runs").join(name).join(run);
    let single = |cfg: RunConfig| vec![(name.to_owned(), RunConfig { output_dir: PathBuf::from("runs").join(name), ..cfg })];
    Ok(match name {
        "micro-overfit" => single(RunConfig {
            model: ModelSection { patch: 16, resolution: 48, embed_dim: 64, width: Some(64), ..ModelSection::default() },
            stages: vec![StageSchedule::new(48, 64_000, 32, 1e-3)],
            toggles: Toggles { caption_source: CaptionSource::Synthetic, ..Toggles::default() },
            optim: OptimConfig { weight_decay: 0.0, ..OptimConfig::default() },
            data: DataSection { probe_resolution: 48, ..DataSection::default() },
            ..base
        }),
        "curriculum-desk" => single(base),
        n if n.starts_with("budget-") => {
            let (_, stages) =
                budget_variants().into_iter().find(|(v, _)| *v == n).ok_or_else(|| Error::Config(format!("unknown preset {name:?}")))?;
            single(RunConfig { stages, ..base })
        }
        "ablation-decoder-captions" => [
            ("full", Toggles::default()),
            ("no-decoder", Toggles { use_decoder: false, ..Toggles::default() }),
            ("original-captions", Toggles { caption_source: CaptionSource::Original, ..Toggles::default() }),
        ]
        .into_iter()
        .map(|(run, toggles)| (run.to_owned(), RunConfig { toggles, output_dir: dir(run), ..base.clone() }))
        .collect(),
        "patch-8-vs-16" => [8, 16]
            .into_iter()
            .map(|p| {
                let run = format!("patch-{p}");
                let model = ModelSection { patch: p, ..base.model.clone() };
                (run.clone(), RunConfig { model, output_dir: dir(&run), ..base.clone() })
            })
            .collect(),
        "tune-frozen-vs-full" => [("frozen", TuneKind::FrozenEncoder), ("full", TuneKind::FullFinetune)]
            .into_iter()
            .map(|(run, mode)| {
                let finetune = FinetuneSection { mode, ..base.finetune.clone() };
                (run.to_owned(), RunConfig { finetune, output_dir: dir(run), ..base.clone() })
            })
            .collect(),
        _ => return Err(Error::Config(format!("unknown preset {name:?}; known: {}", PRESET_NAMES.join(", ")))),
    })
}
