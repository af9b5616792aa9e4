//! Subcommand implementations shared by the binary and the tests.

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{gen_probe_dataset_with, probe::class_name, probe::NUM_CLASSES, write_shard, Dataset, Image, ProbeMode, Sample};
use crate::error::{Error, Result};
use crate::eval::{
    embed_images, embed_texts, render_table, retrieval_recall, vqa_exact_match, write_report, zero_shot_classify, Direction, ReportEntry,
};
use crate::mllm::{finetune, FinetuneConfig, MmModel, TuneKind, TuneMode, VqaDataset};
use crate::model::{Checkpoint, ModelWeights, VISION_PREFIX};
use crate::numerics::{grad_check, GradCheckConfig, GradReport, Graph};
use crate::objectives::{total_loss, CaptionedBatch};
use crate::train::{export_vision, make_batch, run_curriculum, JsonlLog, RunOptions, TrainState};

pub const CONFIG_COPY: &str = "config.toml";
pub const TRAIN_LOG: &str = "train.log.jsonl";
pub const FINETUNE_LOG: &str = "finetune.log.jsonl";
pub const FULL_CHECKPOINT: &str = "final.ovck";
pub const VISION_CHECKPOINT: &str = "vision.ovck";
pub const STATE_FILE: &str = "state.ovts";
pub const REPORT_FILE: &str = "report.jsonl";
pub const FINETUNE_CONFIG: &str = "finetune.toml";
pub const FINETUNE_REPORT: &str = "finetune.report.jsonl";

/// Creates the run directory and freezes the effective config inside it.
pub fn prepare_run_dir(cfg: &RunConfig, copy_name: &str) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join(copy_name), cfg.to_toml()?)?;
    Ok(cfg.output_dir.clone())
}

/// Writes a deterministic probe shard.
pub fn cmd_gendata(seed: u64, n: usize, resolution: usize, mode: ProbeMode, out: &Path) -> Result<u64> {
    let records = gen_probe_dataset_with(seed, n, resolution, mode)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_shard(out, &records)
}

/// Training data named by the config: shards, or generated probe records.
pub fn load_training_data(cfg: &RunConfig) -> Result<Dataset> {
    if cfg.data.shards.is_empty() {
        let d = &cfg.data;
        Dataset::from_records(&gen_probe_dataset_with(d.probe_seed, d.probe_records, d.probe_resolution, d.probe_mode)?)
    } else {
        Dataset::from_shards(&cfg.data.shards)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub samples_seen: u64,
    pub stages: usize,
    pub finished: bool,
    pub output_dir: PathBuf,
}

/// Runs the curriculum; `resume` continues from a saved state file.
pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>, max_steps: Option<u64>) -> Result<TrainSummary> {
    cfg.validate()?;
    let dir = prepare_run_dir(cfg, CONFIG_COPY)?;
    let mut data = load_training_data(cfg)?;
    let state = match resume {
        Some(p) => TrainState::<f32>::load(p)?,
        None => {
            let mut model = cfg.model.resolve()?;
            model.vision.resolution = cfg.stages[0].resolution;
            TrainState::new(ModelWeights::init(model, cfg.seed)?, cfg.optim.clone(), cfg.seed)
        }
    };
    let log_file =
        OpenOptions::new().create(true).append(resume.is_some()).write(true).truncate(resume.is_none()).open(dir.join(TRAIN_LOG))?;
    let mut sink = JsonlLog::new(std::io::BufWriter::new(log_file));
    let snapshots = dir.join("snapshots");
    fs::create_dir_all(&snapshots)?;
    let opts = RunOptions { max_steps, snapshot_dir: Some(snapshots) };
    let out = run_curriculum(&cfg.train_config(), &cfg.stages, &mut data, state, &mut sink, &opts)?;
    out.state.save(dir.join(STATE_FILE))?;
    if out.finished {
        out.state.weights.to_checkpoint().save(dir.join(FULL_CHECKPOINT))?;
        export_vision(&out.state.weights, dir.join(VISION_CHECKPOINT))?;
    }
    Ok(TrainSummary {
        steps: out.state.step,
        samples_seen: out.state.samples_seen,
        stages: cfg.stages.len(),
        finished: out.finished,
        output_dir: dir,
    })
}

/// Drops the text tower and decoder from a full checkpoint.
pub fn cmd_export(checkpoint: &Path, out: &Path) -> Result<u64> {
    let weights = ModelWeights::<f32>::from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    export_vision(&weights, out)
}

fn or_default(p: &Option<PathBuf>, dir: &Path, file: &str) -> PathBuf {
    p.clone().unwrap_or_else(|| dir.join(file))
}

/// Zero-shot accuracy on stratified probe classes and retrieval recall on
/// the training data, written to `report.jsonl`.
pub fn cmd_eval(cfg: &RunConfig) -> Result<Vec<ReportEntry>> {
    let path = or_default(&cfg.eval.checkpoint, &cfg.output_dir, FULL_CHECKPOINT);
    if !path.exists() {
        return Err(Error::Config(format!("checkpoint {} does not exist", path.display())));
    }
    let ck = Checkpoint::load(&path)?;
    let hash = ck.params.hash();
    let w = ModelWeights::<f32>::from_checkpoint(&ck)?;
    let tower = w.vision_tower()?;
    let tok = w.tokenizer()?;
    let res = w.config.vision.resolution;
    let mut entries = Vec::new();
    let entry =
        |metric: String, value: f64, dataset: &str| ReportEntry { metric, value, dataset: dataset.into(), checkpoint_hash: hash.clone() };

    let strat = gen_probe_dataset_with(cfg.data.probe_seed, cfg.eval.images.max(1), res, ProbeMode::Stratified)?;
    let samples = strat.iter().map(Sample::decode).collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = samples.iter().map(|s| usize::from(s.meta.as_ref().and_then(|m| m.label).unwrap_or(0))).collect();
    let classnames: Vec<String> = (0..NUM_CLASSES as u8).map(|c| class_name(c).expect("class in range")).collect();
    let imgs: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    let zs = zero_shot_classify(&tower, &w.params, &w.params, &w.config, &tok, &classnames, &cfg.eval.templates, &imgs, &labels)?;
    entries.push(entry("zero_shot_accuracy".into(), zs.accuracy, "probe-stratified"));

    let mut data = load_training_data(cfg)?;
    let images: Vec<Image> = data.images_at(res)?.to_vec();
    let refs: Vec<&Image> = images.iter().collect();
    let ie = embed_images(&tower, &w.params, &refs)?;
    let caps: Vec<&str> = data
        .samples
        .iter()
        .map(|s| if s.caption_synthetic.is_empty() { s.caption_original.as_str() } else { s.caption_synthetic.as_str() })
        .collect();
    let te = embed_texts(&w.params, &w.config, &tok, &caps)?;
    let ks: Vec<usize> = cfg.eval.ks.iter().copied().filter(|&k| k <= caps.len()).collect();
    let (i2t, t2i) = retrieval_recall(&ie, &te, &ks)?;
    for r in [i2t, t2i] {
        let dir = match r.direction {
            Direction::ImageToText => "i2t",
            Direction::TextToImage => "t2i",
        };
        for (k, v) in r.recall_at {
            entries.push(entry(format!("{dir}_recall@{k}"), v, "train"));
        }
    }
    fs::create_dir_all(&cfg.output_dir)?;
    write_report(fs::File::create(cfg.output_dir.join(REPORT_FILE))?, &entries)?;
    Ok(entries)
}

/// Resolves a stage's dataset reference.
pub fn finetune_data(cfg: &RunConfig, reference: &str, resolution: usize) -> Result<VqaDataset> {
    let d = &cfg.data;
    match reference {
        "" | "probe-vqa" => {
            VqaDataset::from_probe(&gen_probe_dataset_with(d.probe_seed, cfg.finetune.probe_images, resolution, ProbeMode::Stratified)?)
        }
        "probe-captions" => {
            VqaDataset::captions(&gen_probe_dataset_with(d.probe_seed, cfg.finetune.probe_images, resolution, ProbeMode::Mixed)?, true)
        }
        path => VqaDataset::load_jsonl(path),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct FinetuneSummary {
    pub mode: TuneKind,
    pub steps: u64,
    pub vision_hash_before: String,
    pub vision_hash_after: String,
    pub vqa_exact_match: f64,
}

/// Instruction tuning on top of an exported vision checkpoint.
pub fn cmd_finetune(cfg: &RunConfig) -> Result<FinetuneSummary> {
    cfg.validate()?;
    let ft = &cfg.finetune;
    let vision_path = or_default(&ft.vision_checkpoint, &cfg.output_dir, VISION_CHECKPOINT);
    let mut model = MmModel::<f32>::from_vision_file(&vision_path, ft.mm_config(), cfg.seed)?;
    if let Some(lm) = &ft.lm_checkpoint {
        if !lm.exists() {
            return Err(Error::Config(format!("lm checkpoint {} does not exist", lm.display())));
        }
        model.import_lm(&Checkpoint::load(lm)?)?;
    }
    let dir = prepare_run_dir(cfg, FINETUNE_CONFIG)?;
    let mut mode = TuneMode::from_kind(ft.mode);
    if ft.mode == TuneKind::FullFinetune {
        mode.multipliers.0 = vec![(VISION_PREFIX.into(), ft.encoder_multiplier)];
    }
    let res = model.vision.resolution;
    let datasets = ft.stages.iter().map(|s| finetune_data(cfg, &s.data, res)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&VqaDataset> = datasets.iter().collect();
    let before = model.vision_hash();
    let fcfg = FinetuneConfig { seed: cfg.seed, ..FinetuneConfig::default() };
    let log = finetune(&mut model, &mode, &ft.stages, &refs, &fcfg)?;
    let mut out = std::io::BufWriter::new(fs::File::create(dir.join(FINETUNE_LOG))?);
    for r in &log {
        use std::io::Write;
        writeln!(out, "{}", serde_json::to_string(r).map_err(|e| Error::Data(e.to_string()))?)?;
    }
    let last = datasets.last().expect("stages validated non-empty");
    let preds = model.predict(last, fcfg.max_answer_tokens)?;
    let answers: Vec<String> = last.samples.iter().map(|s| s.answer.clone()).collect();
    let em = vqa_exact_match(&preds, &answers)?;
    model.lm_checkpoint()?.save(dir.join("lm.ovck"))?;
    let summary = FinetuneSummary {
        mode: ft.mode,
        steps: log.len() as u64,
        vision_hash_before: before,
        vision_hash_after: model.vision_hash(),
        vqa_exact_match: em,
    };
    let entry = ReportEntry {
        metric: "vqa_exact_match".into(),
        value: em,
        dataset: ft.stages.last().map(|s| s.data.clone()).unwrap_or_default(),
        checkpoint_hash: summary.vision_hash_after.clone(),
    };
    write_report(fs::File::create(dir.join(FINETUNE_REPORT))?, &[entry])?;
    Ok(summary)
}

/// Finite-difference check of the combined objective on a micro model in f64.
pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<GradReport> {
    let gc = &cfg.gradcheck;
    let mut model = cfg.model.resolve()?;
    model.vision = crate::model::VisionConfig::micro(gc.patch, gc.resolution);
    model.init_std = gc.init_std;
    let w = ModelWeights::<f64>::init(model, cfg.seed)?;
    let records = gen_probe_dataset_with(cfg.seed, gc.batch, gc.resolution, ProbeMode::Mixed)?;
    let mut data = Dataset::from_records(&records)?;
    let idx: Vec<usize> = (0..gc.batch).collect();
    let batch: CaptionedBatch<f64> = make_batch(&mut data, &idx, gc.resolution)?;
    let tower = w.vision_tower()?;
    let tok = w.tokenizer()?;
    let toggles = cfg.toggles;
    let report = grad_check(
        |g: &mut Graph<f64>, p| Ok(total_loss(g, p, &w.config, &tower, &tok, &batch, &toggles)?.0.total),
        &w.params,
        &GradCheckConfig { probes_per_tensor: gc.probes_per_tensor, h: gc.h, tol: gc.tol, seed: cfg.seed },
    )?;
    Ok(report)
}

pub fn eval_table(entries: &[ReportEntry]) -> String {
    render_table(entries)
}
