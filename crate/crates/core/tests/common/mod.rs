#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use visenc::Tensor;

/// Rows drawn uniformly on the unit sphere (normalised Gaussians).
pub fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, d: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| gaussian(rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn to_tensor(rows: &[Vec<f64>], shape: &[usize]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), rows.iter().flatten().copied().collect()).unwrap()
}

/// Materialises the full `N × N·K` logit table and evaluates every softmax
/// term literally (no log-sum-exp shortcuts).
pub fn brute_force_multi_positive(img: &[Vec<f64>], caps: &[Vec<Vec<f64>>], tau: f64) -> f64 {
    let n = img.len();
    let k = caps[0].len();
    let mut table = vec![vec![0.0; n * k]; n];
    for i in 0..n {
        for j in 0..n {
            for p in 0..k {
                let dot: f64 = img[i].iter().zip(&caps[j][p]).map(|(a, b)| a * b).sum();
                table[i][j * k + p] = dot / tau;
            }
        }
    }
    let mut i2t = 0.0;
    for i in 0..n {
        let denom: f64 = table[i].iter().map(|s| s.exp()).sum();
        let mut per = 0.0;
        for p in 0..k {
            per += -(table[i][i * k + p].exp() / denom).ln();
        }
        i2t += per / k as f64;
    }
    let mut t2i = 0.0;
    for j in 0..n {
        for p in 0..k {
            let c = j * k + p;
            let denom: f64 = (0..n).map(|i| table[i][c].exp()).sum();
            t2i += -(table[j][c].exp() / denom).ln();
        }
    }
    0.5 * (i2t / n as f64 + t2i / (n * k) as f64)
}

/// Standard single-positive InfoNCE (mean of both directions), computed
/// literally from the `N × N` table.
pub fn plain_infonce(img: &[Vec<f64>], txt: &[Vec<f64>], tau: f64) -> f64 {
    let caps: Vec<Vec<Vec<f64>>> = txt.iter().map(|t| vec![t.clone()]).collect();
    brute_force_multi_positive(img, &caps, tau)
}
