mod common;

use common::{brute_force_multi_positive, plain_infonce, to_tensor, unit_rows};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use visenc::model::{ModelConfig, ModelWeights, TokenizerSpec, DECODER_PREFIX};
use visenc::numerics::{grad_check, GradCheckConfig, Graph};
use visenc::objectives::{multi_positive_contrastive, total_loss, CaptionSource, CaptionedBatch, ContrastiveBatch, Toggles};
use visenc::{Error, Tensor};

fn batch_from(img: &[Vec<f64>], caps: &[Vec<Vec<f64>>], tau: f64) -> ContrastiveBatch<f64> {
    let (n, k, d) = (img.len(), caps[0].len(), img[0].len());
    let flat: Vec<Vec<f64>> = caps.iter().flatten().cloned().collect();
    ContrastiveBatch::new(to_tensor(img, &[n, d]), to_tensor(&flat, &[n, k, d]), tau).unwrap()
}

#[test]
fn single_pair_loss_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let img = unit_rows(&mut rng, 1, 8);
    let cap = unit_rows(&mut rng, 1, 8);
    let loss = multi_positive_contrastive(&batch_from(&img, &[cap], 0.07)).unwrap();
    assert!(loss.abs() < 1e-12);
}

#[test]
fn duplicated_positive_reduces_to_plain_infonce_plus_half_ln2() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let img = unit_rows(&mut rng, 6, 16);
    let txt = unit_rows(&mut rng, 6, 16);
    let caps: Vec<Vec<Vec<f64>>> = txt.iter().map(|t| vec![t.clone(), t.clone()]).collect();
    let got = multi_positive_contrastive(&batch_from(&img, &caps, 0.5)).unwrap();
    let expected = plain_infonce(&img, &txt, 0.5) + 0.5 * 2f64.ln();
    assert!((got - expected).abs() < 1e-6, "{got} vs {expected}");
}

#[test]
fn two_by_two_matches_explicit_logit_table() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let img = unit_rows(&mut rng, 2, 5);
    let caps: Vec<Vec<Vec<f64>>> = (0..2).map(|_| unit_rows(&mut rng, 2, 5)).collect();
    let got = multi_positive_contrastive(&batch_from(&img, &caps, 1.0)).unwrap();
    assert!((got - brute_force_multi_positive(&img, &caps, 1.0)).abs() < 1e-12);
}

#[test]
fn unnormalised_embeddings_violate_contract() {
    let img = Tensor::from_rows(&[&[1.0f64, 1.0]]);
    let cap = Tensor::new(vec![1, 1, 2], vec![1.0, 0.0]).unwrap();
    assert!(matches!(ContrastiveBatch::new(img, cap, 1.0), Err(Error::Contract(_))));
}

#[test]
fn temperature_range_stays_finite_and_doubling_shrinks_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = unit_rows(&mut rng, 8, 8);
    let caps: Vec<Vec<Vec<f64>>> = (0..8).map(|_| unit_rows(&mut rng, 2, 8)).collect();
    let mut tau = 0.01;
    while tau <= 100.0 {
        let b = batch_from(&img, &caps, tau);
        let b2 = batch_from(&img, &caps, 2.0 * tau);
        assert!(multi_positive_contrastive(&b).unwrap().is_finite());
        let (l1, l2) = (b.logits(), b2.logits());
        for (a, c) in l1.data().iter().zip(l2.data()) {
            assert!(c.abs() < a.abs() || *a == 0.0);
        }
        tau *= 3.0;
    }
}

#[test]
fn random_embeddings_start_near_log_batch() {
    for &n in &[64usize, 128] {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let img = unit_rows(&mut rng, n, 256);
            let caps: Vec<Vec<Vec<f64>>> = (0..n).map(|_| unit_rows(&mut rng, 2, 256)).collect();
            let loss = multi_positive_contrastive(&batch_from(&img, &caps, 1.0)).unwrap();
            let expected = 0.5 * (((2 * n) as f64).ln() + (n as f64).ln());
            assert!((loss - expected).abs() < 0.2, "n={n} loss={loss} expected={expected}");
        }
    }
}

proptest! {
    #[test]
    fn invariant_under_common_batch_permutation(seed in 0u64..1000, n in 1usize..6, k in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = unit_rows(&mut rng, n, 6);
        let caps: Vec<Vec<Vec<f64>>> = (0..n).map(|_| unit_rows(&mut rng, k, 6)).collect();
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let img_p: Vec<_> = order.iter().map(|&i| img[i].clone()).collect();
        let caps_p: Vec<_> = order.iter().map(|&i| caps[i].clone()).collect();
        let a = multi_positive_contrastive(&batch_from(&img, &caps, 0.3)).unwrap();
        let b = multi_positive_contrastive(&batch_from(&img_p, &caps_p, 0.3)).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn matches_brute_force_oracle(seed in 0u64..10_000, n in 1usize..5, k in 1usize..3, tau in 0.05f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = unit_rows(&mut rng, n, 7);
        let caps: Vec<Vec<Vec<f64>>> = (0..n).map(|_| unit_rows(&mut rng, k, 7)).collect();
        let got = multi_positive_contrastive(&batch_from(&img, &caps, tau)).unwrap();
        prop_assert!((got - brute_force_multi_positive(&img, &caps, tau)).abs() < 1e-9);
    }
}

fn micro() -> (ModelWeights<f64>, CaptionedBatch<f64>) {
    let cfg = ModelConfig::micro(16, 32, TokenizerSpec::ProbeWords).unwrap();
    let w = ModelWeights::<f64>::init(cfg, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let images = Tensor::from_fn(&[3, 32, 32, 3], |_| rng.gen_range(0.0..1.0));
    let batch = CaptionedBatch {
        images,
        original: vec!["a red circle".into(), "a blue square".into(), "a green triangle".into()],
        synthetic: vec![
            "a red circle in the upper left".into(),
            "a blue square in the center".into(),
            "a green triangle in the lower right".into(),
        ],
    };
    (w, batch)
}

#[test]
fn decoder_off_means_total_is_contrastive_and_decoder_untouched() {
    let (w, batch) = micro();
    let tok = w.tokenizer().unwrap();
    let tower = w.vision_tower().unwrap();
    let toggles = Toggles { use_decoder: false, ..Default::default() };
    let mut g = Graph::new();
    let (vars, br) = total_loss(&mut g, &w.params, &w.config, &tower, &tok, &batch, &toggles).unwrap();
    assert_eq!(br.total, br.contrastive);
    assert_eq!((br.captioning, br.lambda_caption), (0.0, 0.0));
    let grads = g.backward(vars.total).unwrap().params();
    assert!(grads.names().all(|n| !n.starts_with(DECODER_PREFIX)));
    assert!(grads.names().any(|n| n.starts_with("vision/")));
}

#[test]
fn zero_caption_weight_zeroes_decoder_gradients() {
    let (w, batch) = micro();
    let tok = w.tokenizer().unwrap();
    let tower = w.vision_tower().unwrap();
    let toggles = Toggles { lambda_caption: 0.0, ..Default::default() };
    let mut g = Graph::new();
    let (vars, br) = total_loss(&mut g, &w.params, &w.config, &tower, &tok, &batch, &toggles).unwrap();
    assert_eq!(br.total, br.contrastive);
    assert!(br.captioning > 0.0);
    let grads = g.backward(vars.total).unwrap().params();
    for (name, t) in grads.iter().filter(|(n, _)| n.starts_with(DECODER_PREFIX)) {
        assert!(t.data().iter().all(|&v| v == 0.0), "{name} has nonzero gradient");
    }
}

#[test]
fn identical_caption_variants_reduce_to_original_source() {
    let (w, mut batch) = micro();
    batch.synthetic = batch.original.clone();
    let tok = w.tokenizer().unwrap();
    let tower = w.vision_tower().unwrap();
    let eval = |source| {
        let mut g = Graph::new();
        let t = Toggles { caption_source: source, ..Default::default() };
        total_loss(&mut g, &w.params, &w.config, &tower, &tok, &batch, &t).unwrap().1
    };
    let both = eval(CaptionSource::Both);
    let orig = eval(CaptionSource::Original);
    assert!((both.contrastive - (orig.contrastive + 0.5 * 2f64.ln())).abs() < 1e-6);
    assert!((both.captioning - orig.captioning).abs() < 1e-12);
}

#[test]
fn missing_synthetic_caption_is_data_error() {
    let (w, mut batch) = micro();
    batch.synthetic[1].clear();
    let tok = w.tokenizer().unwrap();
    let tower = w.vision_tower().unwrap();
    let mut g = Graph::new();
    let t = Toggles { caption_source: CaptionSource::Synthetic, ..Default::default() };
    assert!(matches!(total_loss(&mut g, &w.params, &w.config, &tower, &tok, &batch, &t), Err(Error::Data(_))));
    // the original-only ablation still runs, decoding the original caption
    let t = Toggles { caption_source: CaptionSource::Original, ..Default::default() };
    let mut g = Graph::new();
    assert!(total_loss(&mut g, &w.params, &w.config, &tower, &tok, &batch, &t).is_ok());
}

#[test]
fn combined_loss_passes_gradient_check() {
    let (w, batch) = micro();
    let tok = w.tokenizer().unwrap();
    let tower = w.vision_tower().unwrap();
    let toggles = Toggles::default();
    let report = grad_check(
        |g, p| Ok(total_loss(g, p, &w.config, &tower, &tok, &batch, &toggles)?.0.total),
        &w.params,
        &GradCheckConfig { probes_per_tensor: 2, h: 1e-4, tol: 1e-3, seed: 5 },
    )
    .unwrap();
    let mut bad: Vec<_> = report.entries.iter().filter(|e| !e.pass).collect();
    bad.sort_by(|a, b| b.max_rel_err.partial_cmp(&a.max_rel_err).unwrap());
    assert!(report.passed(), "{bad:#?}");
}
