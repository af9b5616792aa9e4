use proptest::prelude::*;
use visenc::data::{gen_probe_dataset_with, ProbeMode};
use visenc::mllm::anyres::{validate_allowed, GridLimits};
use visenc::mllm::*;
use visenc::model::{ModelConfig, ModelWeights, TokenizerSpec};
use visenc::numerics::{Graph, ParamSet, Tensor};
use visenc::Error;

fn mm_config() -> MmConfig {
    MmConfig { lm: LmConfig::micro(TokenizerSpec::ProbeWords), projector_hidden: None, anyres: None }
}

fn micro_model(seed: u64) -> MmModel<f32> {
    let cfg = ModelConfig::micro(16, 32, TokenizerSpec::ProbeWords).unwrap();
    let w = ModelWeights::<f32>::init(cfg, seed).unwrap();
    MmModel::from_vision_checkpoint(&w.to_vision_checkpoint(), mm_config(), seed).unwrap()
}

fn probe_vqa(n: usize) -> VqaDataset {
    VqaDataset::from_probe(&gen_probe_dataset_with(3, n, 32, ProbeMode::Stratified).unwrap()).unwrap()
}

fn short_stage(steps: usize) -> Vec<InstructionStage> {
    vec![InstructionStage {
        name: "sft".into(),
        steps,
        batch: 4,
        base_lr: 1e-3,
        warmup_steps: 0,
        text_only: false,
        data: "probe-vqa".into(),
    }]
}

#[test]
fn anyres_examples() {
    let g = select_grid(672, 672, 336, &DEFAULT_ALLOWED).unwrap();
    assert_eq!((g.rows, g.cols), (2, 2));
    assert_eq!(g.crops(), 5);
    assert_eq!(g.visual_tokens(14), 2880);
    let g = select_grid(336, 1344, 336, &DEFAULT_ALLOWED).unwrap();
    assert_eq!((g.rows, g.cols), (1, 4));
    let g = select_grid(336, 336, 336, &DEFAULT_ALLOWED).unwrap();
    assert_eq!((g.rows, g.cols, g.crops()), (1, 1, 2));
}

#[test]
fn tiles_have_base_size_and_thumbnail_last() {
    let img = visenc::data::Image::filled(40, 90, [0.2, 0.4, 0.6]);
    let grid = select_grid(img.height, img.width, 16, &DEFAULT_ALLOWED).unwrap();
    let crops = tile(&img, &grid).unwrap();
    assert_eq!(crops.len(), grid.rows * grid.cols + 1);
    assert!(crops.iter().all(|c| c.height == 16 && c.width == 16));
}

#[test]
fn oversized_grids_rejected() {
    assert!(validate_allowed(&[(5, 1)], GridLimits::default()).is_err());
    assert!(validate_allowed(&[(3, 3)], GridLimits::default()).is_err());
    assert!(validate_allowed(&[(2, 3)], GridLimits::default()).is_ok());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn doubling_never_adds_waste(h in 16usize..800, w in 16usize..800) {
        let a = select_grid(h, w, 336, &DEFAULT_ALLOWED).unwrap();
        let b = select_grid(2 * h, 2 * w, 336, &DEFAULT_ALLOWED).unwrap();
        let fa = a.fit(w, h).wasted_fraction();
        let fb = b.fit(2 * w, 2 * h).wasted_fraction();
        prop_assert!(fb <= fa + 1e-12, "{h}x{w}: {a:?} {fa} -> {b:?} {fb}");
    }

    #[test]
    fn chosen_grid_within_limits(h in 1usize..3000, w in 1usize..3000) {
        let g = select_grid(h, w, 336, &DEFAULT_ALLOWED).unwrap();
        prop_assert!(g.rows <= 4 && g.cols <= 4 && g.rows * g.cols <= 6);
        prop_assert_eq!(g.visual_tokens(14), g.crops() * 576);
    }
}

#[test]
fn sequence_layout_and_mask() {
    let model = micro_model(0);
    let mut g = Graph::<f32>::new();
    let visual = g.constant(Tensor::zeros(&[4, model.config.lm.width]));
    let prompt = [1, 5, 6, 7];
    let answer = [8, 9, 2];
    let seq = build_mm_sequence(&mut g, &model.params, &model.config.lm, Some(visual), &prompt, &answer).unwrap();
    assert_eq!(seq.len(), 4 + prompt.len() + answer.len());
    assert_eq!(seq.mask().iter().filter(|&&m| m).count(), answer.len());
    let predicted: Vec<usize> = seq.targets.iter().flatten().copied().collect();
    assert_eq!(predicted, answer);

    let text_only = build_mm_sequence(&mut g, &model.params, &model.config.lm, None, &prompt, &answer).unwrap();
    assert_eq!(text_only.len(), prompt.len() + answer.len());
}

#[test]
fn masked_positions_get_no_gradient() {
    let model = micro_model(1);
    let mut g = Graph::<f64>::new();
    let params: ParamSet<f64> = model.params.cast();
    let seq = build_mm_sequence(&mut g, &params, &model.config.lm, None, &[1, 4, 5, 6], &[7, 2]).unwrap();
    let vocab = model.tokenizer.vocab_size();
    let mut logits = ParamSet::new();
    let data: Vec<f64> = (0..seq.len() * vocab).map(|i| ((i * 37 % 101) as f64) / 50.0 - 1.0).collect();
    logits.insert("logits", Tensor::new(vec![seq.len(), vocab], data).unwrap()).unwrap();
    let mut g = Graph::<f64>::new();
    let l = g.param(&logits, "logits").unwrap();
    let (loss, counted) = g.cross_entropy(l, seq.targets.clone()).unwrap();
    assert_eq!(counted, 2);
    let grads = g.backward(loss).unwrap().params();
    let grad = grads.get("logits").unwrap();
    for (i, m) in seq.mask().iter().enumerate() {
        let norm: f64 = grad.row(i).iter().map(|v| v * v).sum();
        if *m {
            assert!(norm > 0.0, "answer position {i} has no gradient");
        } else {
            assert_eq!(norm, 0.0, "masked position {i} has gradient");
        }
    }
}

#[test]
fn context_overflow_is_reported() {
    let model = micro_model(0);
    let mut g = Graph::<f32>::new();
    let visual = g.constant(Tensor::zeros(&[125, model.config.lm.width]));
    let err = build_mm_sequence(&mut g, &model.params, &model.config.lm, Some(visual), &[1, 4, 5, 6], &[7, 8, 9, 2]);
    assert!(matches!(err, Err(Error::ContextOverflow { length: 128..=200, context: 128 })));
}

#[test]
fn frozen_keeps_vision_full_changes_it() {
    let data = probe_vqa(18);
    let cfg = FinetuneConfig::default();
    let mut frozen = micro_model(2);
    let before = frozen.vision_hash();
    finetune(&mut frozen, &TuneMode::frozen(), &short_stage(3), &[&data], &cfg).unwrap();
    assert_eq!(frozen.vision_hash(), before);

    let mut full = micro_model(2);
    finetune(&mut full, &TuneMode::full(), &short_stage(3), &[&data], &cfg).unwrap();
    assert_ne!(full.vision_hash(), before);
}

#[test]
fn frozen_mode_rejects_nonzero_vision_multiplier() {
    let model = micro_model(0);
    let mode = TuneMode { kind: TuneKind::FrozenEncoder, multipliers: TuneMode::full().multipliers };
    assert!(mode.check(&model.params).is_err());
}

#[test]
fn three_stage_protocol_runs_with_per_stage_data() {
    let recs = gen_probe_dataset_with(5, 8, 32, ProbeMode::Mixed).unwrap();
    let caps = VqaDataset::captions(&recs, true).unwrap();
    let vqa = probe_vqa(18);
    let stages = three_stage_protocol(2, 2);
    assert_eq!(stages.iter().map(|s| s.name.as_str()).collect::<Vec<_>>(), ["align", "vl-pretrain", "sft"]);
    let mut model = micro_model(4);
    let log = finetune(&mut model, &TuneMode::frozen(), &stages, &[&caps, &caps, &vqa], &FinetuneConfig::default()).unwrap();
    assert_eq!(log.len(), 6);
    assert_eq!(log.iter().map(|r| r.stage).collect::<Vec<_>>(), [0, 0, 1, 1, 2, 2]);
    assert!(log[0].lr > log[2].lr);
    assert!(log.iter().all(|r| r.loss.is_finite()));
}

#[test]
fn stage_and_dataset_counts_must_agree() {
    let vqa = probe_vqa(18);
    let mut model = micro_model(0);
    let err = finetune(&mut model, &TuneMode::frozen(), &three_stage_protocol(2, 2), &[&vqa], &FinetuneConfig::default());
    assert!(matches!(err, Err(Error::Config(_))));
}

#[test]
fn probe_answers_follow_meta() {
    let vqa = probe_vqa(18);
    assert_eq!(vqa.samples.len(), 36);
    for s in &vqa.samples {
        assert!(!s.answer.is_empty());
        assert!(s.question == "what color is the shape" || s.question == "what shape is it");
    }
}

#[test]
fn lm_checkpoint_round_trips() {
    let a = micro_model(0);
    let mut b = micro_model(9);
    b.import_lm(&a.lm_checkpoint().unwrap()).unwrap();
    assert_eq!(a.params.with_prefixes(&[LM_PREFIX]).hash(), b.params.with_prefixes(&[LM_PREFIX]).hash());
    assert!(micro_model(0).config.lm.param_count(36) <= MAX_LM_PARAMS);
}

#[test]
fn anyres_model_emits_all_crop_tokens() {
    let cfg = ModelConfig::micro(16, 32, TokenizerSpec::ProbeWords).unwrap();
    let w = ModelWeights::<f32>::init(cfg, 0).unwrap();
    let mm = MmConfig { anyres: Some(AnyResSettings { base: 32, allowed: DEFAULT_ALLOWED.to_vec() }), ..mm_config() };
    let model = MmModel::<f32>::from_vision_checkpoint(&w.to_vision_checkpoint(), mm, 0).unwrap();
    let img = visenc::data::Image::filled(64, 64, [0.1, 0.2, 0.3]);
    let f = model.image_features(&img).unwrap();
    assert_eq!(f.rows(), 5 * 4);
}
