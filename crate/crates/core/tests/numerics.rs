use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use visenc::error::Error;
use visenc::numerics::{attention, grad_check, layer_norm, softmax_rows, AttnSpec, GradCheckConfig, Graph, ParamSet, Tensor};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn triple_loop(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.data()[i * k + p] * b.data()[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    Tensor::new(vec![m, n], out).unwrap()
}

#[test]
fn matmul_identity_and_hand_case() {
    let i2 = Tensor::<f64>::eye(2);
    assert_eq!(i2.matmul(&i2).unwrap(), i2);
    let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
    let b = Tensor::from_rows(&[&[0.0], &[1.0]]);
    assert_eq!(a.matmul(&b).unwrap(), Tensor::from_rows(&[&[2.0], &[4.0]]));
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[5, 7]);
    let b = rand_tensor(&mut rng, &[7, 3]);
    assert!(a.matmul(&b).unwrap().max_abs_diff(&triple_loop(&a, &b)) < 1e-6);
    let af = a.cast::<f32>();
    let bf = b.cast::<f32>();
    let got = af.matmul(&bf).unwrap().cast::<f64>();
    assert!(got.max_abs_diff(&triple_loop(&a, &b)) < 1e-5);
}

#[test]
fn matmul_shape_mismatch_is_dimension_error() {
    let a = Tensor::<f64>::zeros(&[2, 3]);
    assert!(matches!(a.matmul(&a), Err(Error::Dimension(_))));
}

#[test]
fn layer_norm_edge_cases() {
    let x = Tensor::from_rows(&[&[3.0f64, 3.0, 3.0, 3.0]]);
    let ones = Tensor::full(&[4], 1.0);
    let zeros = Tensor::zeros(&[4]);
    let y = layer_norm(&x, &ones, &zeros, 1e-5).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[3, 4]);
    let beta = Tensor::from_rows(&[&[0.5, -1.0, 2.0, 0.0]]).reshape(&[4]).unwrap();
    let y = layer_norm(&x, &zeros, &beta, 1e-5).unwrap();
    for r in 0..3 {
        assert_eq!(y.row(r), beta.data());
    }
}

#[test]
fn layer_norm_output_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = 64;
    let x = Tensor::from_fn(&[1, d], |_| rng.gen_range(-5.0..5.0));
    let y = layer_norm(&x, &Tensor::full(&[d], 1.0), &Tensor::zeros(&[d]), 1e-5).unwrap();
    let mean = y.data().iter().sum::<f64>() / d as f64;
    let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
    assert!(mean.abs() < 1e-6);
    assert!((var - 1.0).abs() < 1e-4);
}

#[test]
fn attention_single_key_returns_value_row() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let q = rand_tensor(&mut rng, &[3, 4]);
    let k = rand_tensor(&mut rng, &[1, 4]);
    let v = rand_tensor(&mut rng, &[1, 4]);
    let out = attention(&q, &k, &v, false).unwrap();
    for r in 0..3 {
        for (a, b) in out.row(r).iter().zip(v.row(0)) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}

#[test]
fn causal_attention_first_row_is_first_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let q = rand_tensor(&mut rng, &[3, 4]);
    let k = rand_tensor(&mut rng, &[3, 4]);
    let v = rand_tensor(&mut rng, &[3, 4]);
    let out = attention(&q, &k, &v, true).unwrap();
    for (a, b) in out.row(0).iter().zip(v.row(0)) {
        assert!((a - b).abs() < 1e-15);
    }
}

fn explicit_attention(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, causal: bool) -> Tensor<f64> {
    let d = q.cols() as f64;
    let scores = triple_loop(q, &k.transpose().unwrap()).map(|s| s / d.sqrt());
    let mut masked = scores.clone();
    if causal {
        let m = masked.cols();
        for i in 0..masked.rows() {
            for j in i + 1..m {
                masked.data_mut()[i * m + j] = f64::NEG_INFINITY;
            }
        }
    }
    triple_loop(&softmax_rows(&masked), v)
}

#[test]
fn attention_matches_explicit_softmax_then_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let q = rand_tensor(&mut rng, &[3, 5]);
    let k = rand_tensor(&mut rng, &[3, 5]);
    let v = rand_tensor(&mut rng, &[3, 5]);
    for causal in [false, true] {
        let got = attention(&q, &k, &v, causal).unwrap();
        assert!(got.max_abs_diff(&explicit_attention(&q, &k, &v, causal)) < 1e-6);
    }
}

#[test]
fn grad_check_quadratic_and_constant() {
    let mut params = ParamSet::new();
    params.insert("theta", Tensor::new(vec![1, 2], vec![1.0f64, 2.0]).unwrap()).unwrap();
    let quad = |g: &mut Graph<f64>, p: &ParamSet<f64>| {
        let t = g.param(p, "theta")?;
        let sq = g.matmul(t, t, true)?;
        Ok(g.sum(sq))
    };
    let mut g = Graph::new();
    let t = g.param(&params, "theta").unwrap();
    let sq = g.matmul(t, t, true).unwrap();
    let l = g.sum(sq);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.wrt(t).unwrap().data(), &[2.0, 4.0]);
    let cfg = GradCheckConfig { probes_per_tensor: 2, h: 1e-4, ..Default::default() };
    let report = grad_check(quad, &params, &cfg).unwrap();
    assert!(report.max_abs_err() < 1e-9, "{report:?}");

    let constant = |g: &mut Graph<f64>, p: &ParamSet<f64>| {
        g.param(p, "theta")?;
        Ok(g.constant(Tensor::scalar(3.0)))
    };
    let report = grad_check(constant, &params, &cfg).unwrap();
    assert_eq!(report.max_rel_err(), 0.0);
    assert!(report.passed());
}

#[test]
fn grad_check_detects_nondeterminism() {
    use std::cell::Cell;
    let mut params = ParamSet::new();
    params.insert("w", Tensor::scalar(1.0f64)).unwrap();
    let calls = Cell::new(0.0);
    let flaky = |g: &mut Graph<f64>, p: &ParamSet<f64>| {
        calls.set(calls.get() + 1.0);
        let w = g.param(p, "w")?;
        let c = g.constant(Tensor::scalar(calls.get()));
        g.add(w, c)
    };
    let err = grad_check(flaky, &params, &GradCheckConfig::default()).unwrap_err();
    assert!(matches!(err, Error::Determinism(_)));
}

/// Every tape op, chained into one scalar, checked by finite differences.
#[test]
fn every_op_backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut p = ParamSet::new();
    p.insert("x", rand_tensor(&mut rng, &[6, 8])).unwrap();
    p.insert("w", rand_tensor(&mut rng, &[8, 8])).unwrap();
    p.insert("b", rand_tensor(&mut rng, &[8])).unwrap();
    p.insert("gamma", rand_tensor(&mut rng, &[8])).unwrap();
    p.insert("beta", rand_tensor(&mut rng, &[8])).unwrap();
    p.insert("s", Tensor::scalar(0.3)).unwrap();
    p.insert("table", rand_tensor(&mut rng, &[5, 8])).unwrap();
    let loss = |g: &mut Graph<f64>, p: &ParamSet<f64>| {
        let x = g.param(p, "x")?;
        let w = g.param(p, "w")?;
        let b = g.param(p, "b")?;
        let h = g.linear(x, w, Some(b))?;
        let h = g.gelu(h);
        let (gm, bt) = (g.param(p, "gamma")?, g.param(p, "beta")?);
        let h = g.layer_norm(h, gm, bt, 1e-5)?;
        let spec = AttnSpec { batch: 2, q_len: 3, k_len: 3, heads: 2, causal: true, key_lens: Some(vec![3, 2]) };
        let a = g.attention(h, x, h, spec)?;
        let spec2 = AttnSpec { batch: 2, q_len: 3, k_len: 3, heads: 4, causal: false, key_lens: None };
        let a2 = g.attention(a, h, x, spec2)?;
        let t = g.param(p, "table")?;
        let e = g.gather_rows(t, vec![0, 3, 3, 1, 4, 2])?;
        let a2 = g.add(a2, e)?;
        let cat = g.concat_rows(&[a2, x])?;
        let pooled = g.group_mean(cat, 3)?;
        let nrm = g.l2_normalize(pooled);
        let s = g.param(p, "s")?;
        let s = g.exp(s);
        let img = g.gather_rows(nrm, vec![0, 1])?;
        let txt = g.gather_rows(nrm, vec![2, 3, 1, 0])?;
        let logits = g.matmul(img, txt, true)?;
        let logits = g.scale_by(logits, s)?;
        let nce = g.multi_positive_nce(logits, 2, 2)?;
        let (ce, _) = g.cross_entropy(a, vec![Some(1), None, Some(7), Some(0), None, Some(2)])?;
        let ce = g.scale(ce, 0.5);
        let tot = g.add(nce, ce)?;
        let m = g.mean(x);
        g.add(tot, m)
    };
    let cfg = GradCheckConfig { probes_per_tensor: 12, h: 1e-5, tol: 1e-5, seed: 3 };
    let report = grad_check(loss, &p, &cfg).unwrap();
    assert!(report.passed(), "{report:#?}");
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor::from_fn(&[10, 17], |_| rng.gen_range(-30.0..30.0));
    let s = softmax_rows(&x);
    for r in 0..10 {
        assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

proptest! {
    #[test]
    fn attention_output_is_convex_combination(seed in 0u64..10_000, n in 1usize..6, m in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = rand_tensor(&mut rng, &[n, 1]).map(|v| v * 10.0);
        let k = rand_tensor(&mut rng, &[m, 1]);
        let v = rand_tensor(&mut rng, &[m, 1]);
        let out = attention(&q, &k, &v, false).unwrap();
        let lo = v.data().iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for &o in out.data() {
            prop_assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
        }
    }

    #[test]
    fn ops_are_bit_deterministic(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = rand_tensor(&mut rng, &[4, 6]).cast::<f32>();
        let k = rand_tensor(&mut rng, &[4, 6]).cast::<f32>();
        let a = attention(&q, &k, &k, true).unwrap();
        let b = attention(&q, &k, &k, true).unwrap();
        prop_assert!(a.bit_eq(&b));
        prop_assert!(q.matmul(&k.transpose().unwrap()).unwrap().bit_eq(&q.matmul(&k.transpose().unwrap()).unwrap()));
    }
}
