//! Progressive-resolution training: schedules, optimizer, resumable state,
//! the curriculum loop and vision export.

pub mod optim;
pub mod schedule;
pub mod state;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use optim::{AdamW, LrMultipliers, OptimConfig, StepStats};
pub use schedule::{budget_variants, desk_curriculum, lr_at, validate_stages, StageSchedule};
pub use state::TrainState;

use crate::data::{stack_images, Dataset};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, ModelWeights};
use crate::numerics::{Graph, Scalar};
use crate::objectives::{total_loss, CaptionedBatch, LossBreakdown, Toggles};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub optim: OptimConfig,
    pub toggles: Toggles,
    /// Omit wall-clock fields so logs are bit-comparable across runs.
    pub strict: bool,
    pub lr_multipliers: LrMultipliers,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub stage: usize,
    pub resolution: usize,
    /// Pairs consumed in this stage, including this step's batch.
    pub stage_samples: usize,
    pub samples_seen: u64,
    pub lr: f64,
    pub contrastive: f64,
    pub captioning: f64,
    pub total: f64,
    pub lambda_caption: f64,
    pub grad_norm: f64,
    pub epoch: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<u64>,
}

impl StepRecord {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown { contrastive: self.contrastive, captioning: self.captioning, total: self.total, lambda_caption: self.lambda_caption }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEvent {
    Step(StepRecord),
    StageBoundary {
        step: u64,
        from_stage: usize,
        to_stage: usize,
        from_resolution: usize,
        to_resolution: usize,
        /// Parameter hash on either side of the boundary.
        params_hash_before: String,
        params_hash_after: String,
    },
    EpochWrap {
        step: u64,
        epoch: u64,
    },
}

pub trait LogSink {
    fn record(&mut self, ev: &LogEvent) -> Result<()>;
}

impl LogSink for Vec<LogEvent> {
    fn record(&mut self, ev: &LogEvent) -> Result<()> {
        self.push(ev.clone());
        Ok(())
    }
}

/// Append-only JSON-lines log.
pub struct JsonlLog<W: Write> {
    out: W,
}

impl<W: Write> JsonlLog<W> {
    pub fn new(out: W) -> Self {
        JsonlLog { out }
    }
}

impl<W: Write> LogSink for JsonlLog<W> {
    fn record(&mut self, ev: &LogEvent) -> Result<()> {
        let line = serde_json::to_string(ev).map_err(|e| Error::Data(format!("log encode: {e}")))?;
        writeln!(self.out, "{line}")?;
        self.out.flush()?;
        Ok(())
    }
}

/// Parses a JSON-lines training log.
pub fn parse_log(text: &str) -> Result<Vec<LogEvent>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Data(format!("log line: {e}"))))
        .collect()
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Stop after this many total optimizer steps (the state stays resumable).
    pub max_steps: Option<u64>,
    /// Write `stage-<i>.ovck` vision snapshots here as each stage completes.
    pub snapshot_dir: Option<PathBuf>,
}

pub struct Outcome<T> {
    pub state: TrainState<T>,
    /// One vision checkpoint per stage completed during this call.
    pub snapshots: Vec<Checkpoint>,
    pub finished: bool,
}

/// Visiting order of epoch `epoch`.
pub fn epoch_permutation(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Assembles a training batch from dataset rows at `resolution`.
pub fn make_batch<T: Scalar>(data: &mut Dataset, indices: &[usize], resolution: usize) -> Result<CaptionedBatch<T>> {
    let images = data.images_at(resolution)?;
    let picked: Vec<_> = indices.iter().map(|&i| &images[i]).collect();
    let images = stack_images(&picked)?;
    let original = indices.iter().map(|&i| data.samples[i].caption_original.clone()).collect();
    let synthetic = indices.iter().map(|&i| data.samples[i].caption_synthetic.clone()).collect();
    Ok(CaptionedBatch { images, original, synthetic })
}

/// Runs (or resumes) the curriculum from `state`.
///
/// Each stage consumes exactly its sample budget. Between stages only the
/// positional table is rebuilt; learned tensors carry over untouched. Data
/// wraps around with a fresh seeded permutation per epoch.
pub fn run_curriculum<T: Scalar>(
    cfg: &TrainConfig,
    stages: &[StageSchedule],
    data: &mut Dataset,
    mut state: TrainState<T>,
    sink: &mut dyn LogSink,
    opts: &RunOptions,
) -> Result<Outcome<T>> {
    let patch = state.weights.config.vision.patch;
    validate_stages(stages, patch)?;
    let errs = cfg.optim.problems();
    if !errs.is_empty() {
        return Err(Error::Validation(errs));
    }
    if data.is_empty() {
        return Err(Error::Data("training data is empty".into()));
    }
    let tokenizer = state.weights.tokenizer()?;
    let mut tower = state.weights.vision_tower()?;
    let frozen = cfg.lr_multipliers.frozen_prefixes();
    let n = data.len();
    let mut perm = epoch_permutation(state.seed, state.epoch, n);
    let mut snapshots = Vec::new();
    let started = Instant::now();

    while state.stage_index < stages.len() {
        let s = &stages[state.stage_index];
        if tower.config().resolution != s.resolution {
            tower.set_resolution(s.resolution)?;
        }
        if state.stage_samples >= s.samples {
            let mut snap_weights = state.weights.clone();
            snap_weights.config.vision.resolution = s.resolution;
            let snap = snap_weights.to_vision_checkpoint();
            if let Some(dir) = &opts.snapshot_dir {
                snap.save(dir.join(format!("stage-{}.ovck", state.stage_index)))?;
            }
            snapshots.push(snap);
            if let Some(next) = stages.get(state.stage_index + 1) {
                let before = state.weights.params.hash();
                tower.set_resolution(next.resolution)?;
                let after = state.weights.params.hash();
                sink.record(&LogEvent::StageBoundary {
                    step: state.step,
                    from_stage: state.stage_index,
                    to_stage: state.stage_index + 1,
                    from_resolution: s.resolution,
                    to_resolution: next.resolution,
                    params_hash_before: before,
                    params_hash_after: after,
                })?;
            }
            state.stage_index += 1;
            state.stage_samples = 0;
            continue;
        }
        if opts.max_steps.is_some_and(|m| state.step >= m) {
            break;
        }

        let mut indices = Vec::with_capacity(s.batch);
        while indices.len() < s.batch {
            if state.cursor == n {
                state.epoch += 1;
                state.cursor = 0;
                perm = epoch_permutation(state.seed, state.epoch, n);
                sink.record(&LogEvent::EpochWrap { step: state.step, epoch: state.epoch })?;
            }
            indices.push(perm[state.cursor]);
            state.cursor += 1;
        }
        let batch = make_batch::<T>(data, &indices, s.resolution)?;

        let mut g = Graph::new();
        g.freeze_prefixes(&frozen);
        let cfg_model = state.weights.config.clone();
        let (vars, breakdown) = total_loss(&mut g, &state.weights.params, &cfg_model, &tower, &tokenizer, &batch, &cfg.toggles)?;
        let grads = g.backward(vars.total)?.params();

        state.stage_samples += s.batch;
        state.samples_seen += s.batch as u64;
        state.step += 1;
        let lr = lr_at(s, state.stage_samples)?;
        let stats = state.optim.step(&mut state.weights.params, &grads, lr, &cfg.lr_multipliers)?;

        sink.record(&LogEvent::Step(StepRecord {
            step: state.step,
            stage: state.stage_index,
            resolution: s.resolution,
            stage_samples: state.stage_samples,
            samples_seen: state.samples_seen,
            lr,
            contrastive: breakdown.contrastive,
            captioning: breakdown.captioning,
            total: breakdown.total,
            lambda_caption: breakdown.lambda_caption,
            grad_norm: stats.grad_norm,
            epoch: state.epoch,
            wall_ms: (!cfg.strict).then(|| started.elapsed().as_millis() as u64),
        }))?;
    }
    let finished = state.stage_index >= stages.len();
    if finished {
        if let Some(last) = stages.last() {
            state.weights.config.vision.resolution = last.resolution;
        }
    }
    Ok(Outcome { state, snapshots, finished })
}

/// Writes the vision backbone only (text tower and decoder dropped).
pub fn export_vision<T: Scalar>(weights: &ModelWeights<T>, path: impl AsRef<Path>) -> Result<u64> {
    weights.to_vision_checkpoint().save(path)
}
