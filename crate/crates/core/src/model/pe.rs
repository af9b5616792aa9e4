use crate::error::{dim_err, Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Splits an `[H, W, 3]` image into non-overlapping `patch×patch` blocks in
/// row-major grid order. Each row is one patch flattened as `(y, x, channel)`.
pub fn patchify<T: Scalar>(image: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(dim_err!("patchify expects [H, W, 3], got {s:?}"));
    }
    let mut out = Vec::with_capacity(image.numel());
    let rows = patchify_into(image.data(), s[0], s[1], patch, &mut out)?;
    Tensor::new(vec![rows, 3 * patch * patch], out)
}

/// Patchifies a batch `[N, H, W, 3]` into `[N·T × 3p²]`.
pub fn patchify_batch<T: Scalar>(images: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let s = images.shape();
    if s.len() != 4 || s[3] != 3 {
        return Err(dim_err!("patchify_batch expects [N, H, W, 3], got {s:?}"));
    }
    let per = s[1] * s[2] * 3;
    let mut out = Vec::with_capacity(images.numel());
    let mut rows = 0;
    for img in images.data().chunks(per) {
        rows += patchify_into(img, s[1], s[2], patch, &mut out)?;
    }
    Tensor::new(vec![rows, 3 * patch * patch], out)
}

fn patchify_into<T: Scalar>(data: &[T], h: usize, w: usize, patch: usize, out: &mut Vec<T>) -> Result<usize> {
    if patch == 0 || !h.is_multiple_of(patch) || !w.is_multiple_of(patch) {
        return Err(dim_err!("image {h}x{w} is not divisible by patch {patch}"));
    }
    let (gh, gw) = (h / patch, w / patch);
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..patch {
                let y = gy * patch + py;
                let start = (y * w + gx * patch) * 3;
                out.extend_from_slice(&data[start..start + patch * 3]);
            }
        }
    }
    Ok(gh * gw)
}

fn frequencies(n: usize) -> Vec<f64> {
    (0..n).map(|i| 1.0 / 10_000f64.powf(i as f64 / n as f64)).collect()
}

/// Fixed 2-D sine-cosine table `[(grid_h·grid_w) × width]`.
///
/// Each row is `[sin(y·ω), cos(y·ω), sin(x·ω), cos(x·ω)]` with `width/4`
/// frequencies `ω_i = 10000^(-i/(width/4))`.
pub fn sincos_2d<T: Scalar>(grid_h: usize, grid_w: usize, width: usize) -> Result<Tensor<T>> {
    if width == 0 || !width.is_multiple_of(4) {
        return Err(Error::Config(format!("sincos width {width} must be a positive multiple of 4")));
    }
    if grid_h == 0 || grid_w == 0 {
        return Err(dim_err!("empty positional grid {grid_h}x{grid_w}"));
    }
    let q = width / 4;
    let omega = frequencies(q);
    let mut data = Vec::with_capacity(grid_h * grid_w * width);
    for y in 0..grid_h {
        for x in 0..grid_w {
            for pos in [y as f64, x as f64] {
                data.extend(omega.iter().map(|w| T::lit((pos * w).sin())));
                data.extend(omega.iter().map(|w| T::lit((pos * w).cos())));
            }
        }
    }
    Tensor::new(vec![grid_h * grid_w, width], data)
}

/// Fixed 1-D sine-cosine table `[len × width]`, rows `[sin(p·ω), cos(p·ω)]`.
pub fn sincos_1d<T: Scalar>(len: usize, width: usize) -> Result<Tensor<T>> {
    if width == 0 || !width.is_multiple_of(2) {
        return Err(Error::Config(format!("sincos width {width} must be a positive even number")));
    }
    let omega = frequencies(width / 2);
    let mut data = Vec::with_capacity(len * width);
    for p in 0..len {
        data.extend(omega.iter().map(|w| T::lit((p as f64 * w).sin())));
        data.extend(omega.iter().map(|w| T::lit((p as f64 * w).cos())));
    }
    Tensor::new(vec![len, width], data)
}
