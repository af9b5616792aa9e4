use visenc::data::{gen_probe_dataset, Dataset};
use visenc::eval::embed_images;
use visenc::model::{Checkpoint, ModelConfig, ModelWeights, TokenizerSpec, VisionBackbone, DECODER_PREFIX, TEXT_PREFIX};
use visenc::objectives::Toggles;
use visenc::train::*;

fn data(n: usize) -> Dataset {
    Dataset::from_records(&gen_probe_dataset(11, n, 64).unwrap()).unwrap()
}

fn state(seed: u64) -> TrainState<f32> {
    let cfg = ModelConfig::micro(16, 32, TokenizerSpec::ProbeWords).unwrap();
    TrainState::new(ModelWeights::init(cfg, seed).unwrap(), OptimConfig::default(), seed)
}

fn three_stages() -> Vec<StageSchedule> {
    vec![StageSchedule::new(32, 64, 8, 1e-3), StageSchedule::new(48, 16, 4, 1e-4), StageSchedule::new(64, 8, 2, 5e-5)]
}

fn strict() -> TrainConfig {
    TrainConfig { strict: true, ..TrainConfig::default() }
}

fn steps(log: &[LogEvent]) -> Vec<&StepRecord> {
    log.iter().filter_map(|e| if let LogEvent::Step(s) = e { Some(s) } else { None }).collect()
}

fn run(stages: &[StageSchedule], n: usize, cfg: &TrainConfig) -> (Outcome<f32>, Vec<LogEvent>) {
    let mut log = Vec::new();
    let out = run_curriculum(cfg, stages, &mut data(n), state(0), &mut log, &RunOptions::default()).unwrap();
    (out, log)
}

#[test]
fn stages_end_at_exact_sample_counts() {
    let stages = three_stages();
    let (out, log) = run(&stages, 20, &strict());
    assert!(out.finished);
    let recs = steps(&log);
    for (i, s) in stages.iter().enumerate() {
        let in_stage: Vec<_> = recs.iter().filter(|r| r.stage == i).collect();
        assert_eq!(in_stage.len(), s.samples / s.batch);
        assert_eq!(in_stage.last().unwrap().stage_samples, s.samples);
        assert!(in_stage.iter().all(|r| r.resolution == s.resolution));
    }
    assert_eq!(out.state.samples_seen, 88);
    let boundaries: Vec<_> = log.iter().filter(|e| matches!(e, LogEvent::StageBoundary { .. })).collect();
    assert_eq!(boundaries.len(), 2);
    for b in boundaries {
        let LogEvent::StageBoundary { params_hash_before, params_hash_after, .. } = b else { unreachable!() };
        assert_eq!(params_hash_before, params_hash_after);
    }
}

#[test]
fn logged_lr_matches_closed_form() {
    let stages = three_stages();
    let (_, log) = run(&stages, 20, &strict());
    for r in steps(&log) {
        let expect = lr_at(&stages[r.stage], r.stage_samples).unwrap();
        assert!((r.lr - expect).abs() <= 1e-9, "step {}", r.step);
    }
}

#[test]
fn single_stage_has_no_boundaries() {
    let stages = vec![StageSchedule::new(32, 32, 8, 1e-3)];
    let (out, log) = run(&stages, 16, &strict());
    assert!(!log.iter().any(|e| matches!(e, LogEvent::StageBoundary { .. })));
    assert_eq!(out.snapshots.len(), 1);
    assert_eq!(steps(&log).len(), 4);
}

#[test]
fn snapshots_per_stage_reload_and_differ() {
    let stages = three_stages();
    let dir = tempfile::tempdir().unwrap();
    let mut log = Vec::new();
    let opts = RunOptions { max_steps: None, snapshot_dir: Some(dir.path().to_path_buf()) };
    let out = run_curriculum(&strict(), &stages, &mut data(20), state(0), &mut log, &opts).unwrap();
    assert_eq!(out.snapshots.len(), 3);
    for (i, s) in stages.iter().enumerate() {
        let b = VisionBackbone::<f32>::load(dir.path().join(format!("stage-{i}.ovck"))).unwrap();
        assert_eq!(b.tower.config().resolution, s.resolution);
    }
    for i in 0..3 {
        for j in i + 1..3 {
            assert_ne!(out.snapshots[i].params.hash(), out.snapshots[j].params.hash());
        }
    }
}

#[test]
fn strict_runs_replay_bit_exactly() {
    let stages = vec![StageSchedule::new(32, 80, 8, 1e-3)];
    let (a, la) = run(&stages, 24, &strict());
    let (b, lb) = run(&stages, 24, &strict());
    assert_eq!(la, lb);
    assert_eq!(a.state.weights.params.hash(), b.state.weights.params.hash());
    assert!(steps(&la).iter().all(|s| s.wall_ms.is_none()));
    assert!(la.iter().any(|e| matches!(e, LogEvent::EpochWrap { .. })));
}

#[test]
fn resume_continues_bit_identically() {
    let stages = three_stages();
    let cfg = strict();
    let (full, full_log) = run(&stages, 20, &cfg);

    let mut first = Vec::new();
    let opts = RunOptions { max_steps: Some(5), snapshot_dir: None };
    let part = run_curriculum(&cfg, &stages, &mut data(20), state(0), &mut first, &opts).unwrap();
    assert!(!part.finished);
    let restored = TrainState::<f32>::from_bytes(&part.state.to_bytes().unwrap()).unwrap();
    let mut second = Vec::new();
    let rest = run_curriculum(&cfg, &stages, &mut data(20), restored, &mut second, &RunOptions::default()).unwrap();
    first.extend(second);
    assert_eq!(first, full_log);
    assert_eq!(rest.state.weights.params.hash(), full.state.weights.params.hash());
}

#[test]
fn log_round_trips_through_jsonl() {
    let stages = three_stages();
    let (_, log) = run(&stages, 20, &strict());
    let mut buf = Vec::new();
    {
        let mut sink = JsonlLog::new(&mut buf);
        for e in &log {
            sink.record(e).unwrap();
        }
    }
    assert_eq!(parse_log(&String::from_utf8(buf).unwrap()).unwrap(), log);
}

#[test]
fn decoder_off_total_is_contrastive() {
    let stages = vec![StageSchedule::new(32, 48, 8, 1e-3)];
    let cfg = TrainConfig { strict: true, toggles: Toggles { use_decoder: false, ..Toggles::default() }, ..TrainConfig::default() };
    let (_, log) = run(&stages, 16, &cfg);
    for r in steps(&log) {
        assert_eq!(r.total, r.contrastive);
        assert_eq!(r.captioning, 0.0);
    }
}

#[test]
fn export_drops_text_and_matches_forward() {
    let stages = vec![StageSchedule::new(32, 16, 8, 1e-3)];
    let (out, _) = run(&stages, 16, &strict());
    let dir = tempfile::tempdir().unwrap();
    let vpath = dir.path().join("v.ovck");
    let fpath = dir.path().join("f.ovck");
    let vsize = export_vision(&out.state.weights, &vpath).unwrap();
    let fsize = out.state.weights.to_checkpoint().save(&fpath).unwrap();
    assert!(vsize < fsize);
    let ck = Checkpoint::load(&vpath).unwrap();
    assert!(ck.params.names().all(|n| !n.starts_with(TEXT_PREFIX) && !n.starts_with(DECODER_PREFIX)));

    let backbone = VisionBackbone::<f32>::load(&vpath).unwrap();
    let mut ds = data(8);
    let imgs: Vec<_> = ds.images_at(32).unwrap().to_vec();
    let refs: Vec<_> = imgs.iter().collect();
    let w = &out.state.weights;
    let a = embed_images(&w.vision_tower().unwrap(), &w.params, &refs).unwrap();
    let b = embed_images(&backbone.tower, &backbone.params, &refs).unwrap();
    let max = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
    assert!(max <= 1e-6, "{max}");
}

#[test]
fn zero_gradient_without_decay_changes_nothing() {
    let w = state(0).weights;
    let mut params = w.params.clone();
    let zeros = {
        let mut z = params.clone();
        for (_, t) in z.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        z
    };
    let mut opt = AdamW::new(OptimConfig { weight_decay: 0.0, ..OptimConfig::default() });
    opt.step(&mut params, &zeros, 1e-2, &LrMultipliers::default()).unwrap();
    assert_eq!(params.hash(), w.params.hash());
}

#[test]
fn desk_and_budget_schedules_validate() {
    let desk = desk_curriculum();
    assert_eq!(desk.iter().map(|s| s.resolution).collect::<Vec<_>>(), [64, 96, 128]);
    assert_eq!(desk[0].samples / desk[2].samples, 50);
    assert_eq!(desk[1].samples / desk[2].samples, 4);
    validate_stages(&desk, 16).unwrap();
    let variants = budget_variants();
    assert_eq!(variants.len(), 4);
    for (name, stages) in variants {
        validate_stages(&stages, 16).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
    assert!(validate_stages(&[StageSchedule::new(40, 16, 8, 1e-3)], 16).is_err());
    assert!(validate_stages(&[StageSchedule::new(32, 15, 8, 1e-3)], 16).is_err());
}
