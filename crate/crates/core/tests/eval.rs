mod common;

use common::{to_tensor, unit_rows};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use visenc::data::{gen_probe_dataset_with, ProbeMode, Sample};
use visenc::eval::*;
use visenc::model::{ModelConfig, ModelWeights, TokenizerSpec};
use visenc::Tensor;

fn identity(n: usize) -> Tensor<f64> {
    let mut t = Tensor::zeros(&[n, n]);
    for i in 0..n {
        t.data_mut()[i * n + i] = 1.0;
    }
    t
}

#[test]
fn orthogonal_pairs_are_perfect() {
    let e = identity(10);
    let (i2t, t2i) = retrieval_recall(&e, &e, &[1, 5]).unwrap();
    assert_eq!(i2t.recall_at[&1], 1.0);
    assert_eq!(t2i.recall_at[&1], 1.0);
}

#[test]
fn k_equal_to_corpus_is_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = to_tensor(&unit_rows(&mut rng, 20, 8), &[20, 8]);
    let b = to_tensor(&unit_rows(&mut rng, 20, 8), &[20, 8]);
    let (i2t, t2i) = retrieval_recall(&a, &b, &[20]).unwrap();
    assert_eq!(i2t.recall_at[&20], 1.0);
    assert_eq!(t2i.recall_at[&20], 1.0);
    assert!(retrieval_recall(&a, &b, &[21]).is_err());
    assert!(retrieval_recall(&a, &b, &[0]).is_err());
}

#[test]
fn random_embeddings_near_chance() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = to_tensor(&unit_rows(&mut rng, 100, 16), &[100, 16]);
        let b = to_tensor(&unit_rows(&mut rng, 100, 16), &[100, 16]);
        let (i2t, t2i) = retrieval_recall(&a, &b, &[1]).unwrap();
        assert!(i2t.recall_at[&1] <= 0.05 && t2i.recall_at[&1] <= 0.05, "seed {seed}");
    }
}

#[test]
fn ties_break_to_lowest_index() {
    assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    assert_eq!(rank_of(&[2.0, 2.0, 2.0], 0), 0);
    assert_eq!(rank_of(&[2.0, 2.0, 2.0], 2), 2);
    let same = Tensor::new(vec![3, 2], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
    let (i2t, _) = retrieval_recall(&same, &same, &[1]).unwrap();
    assert!((i2t.recall_at[&1] - 1.0 / 3.0).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn directions_swap_under_transpose(seed in 0u64..1000, n in 2usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = to_tensor(&unit_rows(&mut rng, n, 6), &[n, 6]);
        let b = to_tensor(&unit_rows(&mut rng, n, 6), &[n, 6]);
        let ks: Vec<usize> = [1, 2, n].into_iter().filter(|&k| k <= n).collect();
        let (ab_i2t, ab_t2i) = retrieval_recall(&a, &b, &ks).unwrap();
        let (ba_i2t, ba_t2i) = retrieval_recall(&b, &a, &ks).unwrap();
        prop_assert_eq!(ab_i2t.recall_at, ba_t2i.recall_at);
        prop_assert_eq!(ab_t2i.recall_at, ba_i2t.recall_at);
        let r = retrieval_recall(&a, &b, &ks).unwrap().0.recall_at;
        let vals: Vec<f64> = r.values().copied().collect();
        prop_assert!(vals.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(vals.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn zero_shot_invariant_to_positive_scale(seed in 0u64..1000, scale in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let imgs = to_tensor(&unit_rows(&mut rng, 12, 5), &[12, 5]);
        let classes = to_tensor(&unit_rows(&mut rng, 4, 5), &[4, 5]);
        let scaled = classes.map(|v| v * scale);
        prop_assert_eq!(zero_shot_predict(&imgs, &classes).unwrap(), zero_shot_predict(&imgs, &scaled).unwrap());
    }

    #[test]
    fn accuracy_is_count_weighted_mean(labels in prop::collection::vec(0usize..5, 1..60), preds_seed in 0u64..100) {
        let preds: Vec<usize> = labels.iter().enumerate().map(|(i, &l)| if (i as u64 + preds_seed).is_multiple_of(3) { (l + 1) % 5 } else { l }).collect();
        let r = zero_shot_score(&preds, &labels).unwrap();
        let weighted: f64 = r.per_class.values().map(|&(acc, n)| acc * n as f64).sum::<f64>() / labels.len() as f64;
        prop_assert!((weighted - r.accuracy).abs() < 1e-12);
    }
}

#[test]
fn single_class_is_always_right() {
    let cfg = ModelConfig::micro(16, 32, TokenizerSpec::ProbeWords).unwrap();
    let w = ModelWeights::<f64>::init(cfg, 0).unwrap();
    let recs = gen_probe_dataset_with(1, 4, 32, ProbeMode::Stratified).unwrap();
    let samples: Vec<Sample> = recs.iter().map(|r| Sample::decode(r).unwrap()).collect();
    let imgs: Vec<_> = samples.iter().map(|s| &s.image).collect();
    let tower = w.vision_tower().unwrap();
    let tok = w.tokenizer().unwrap();
    let r = zero_shot_classify(&tower, &w.params, &w.params, &w.config, &tok, &["red circle".into()], &["a {}".into()], &imgs, &[0; 4])
        .unwrap();
    assert_eq!(r.accuracy, 1.0);
}

#[test]
fn duplicated_templates_change_nothing() {
    let cfg = ModelConfig::micro(16, 32, TokenizerSpec::ProbeWords).unwrap();
    let w = ModelWeights::<f64>::init(cfg, 3).unwrap();
    let tok = w.tokenizer().unwrap();
    let names: Vec<String> = ["red circle", "blue square", "green triangle"].map(String::from).to_vec();
    let one = class_embeddings(&w.params, &w.config, &tok, &names, &["a {}".into()]).unwrap();
    let two = class_embeddings(&w.params, &w.config, &tok, &names, &["a {}".into(), "a {}".into()]).unwrap();
    for (x, y) in one.data().iter().zip(two.data()) {
        assert!((x - y).abs() < 1e-12);
    }
    assert!(class_embeddings(&w.params, &w.config, &tok, &names, &[]).is_err());
}

#[test]
fn exact_match_normalises() {
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    assert_eq!(vqa_exact_match(&s(&["red"]), &s(&["red"])).unwrap(), 1.0);
    assert_eq!(vqa_exact_match(&s(&["Red "]), &s(&["red"])).unwrap(), 1.0);
    assert_eq!(vqa_exact_match(&s(&["blue", "square"]), &s(&["red", "circle"])).unwrap(), 0.0);
    assert!(vqa_exact_match(&s(&["a"]), &s(&[])).is_err());
}

#[test]
fn report_lines_parse_back() {
    let entries = vec![
        ReportEntry { metric: "i2t_recall@1".into(), value: 0.5, dataset: "train".into(), checkpoint_hash: "ab".repeat(32) },
        ReportEntry { metric: "zero_shot_accuracy".into(), value: 0.25, dataset: "probe".into(), checkpoint_hash: "cd".into() },
    ];
    let mut buf = Vec::new();
    write_report(&mut buf, &entries).unwrap();
    let back: Vec<ReportEntry> = String::from_utf8(buf).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(back, entries);
    let table = render_table(&entries);
    assert_eq!(table.lines().count(), 3);
    assert!(table.contains("zero_shot_accuracy"));
}
