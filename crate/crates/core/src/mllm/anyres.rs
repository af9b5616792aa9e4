use serde::{Deserialize, Serialize};

use crate::data::{resize_to, Image};
use crate::error::{Error, Result};

pub const DEFAULT_BASE: usize = 336;
const PAD_VALUE: f32 = 0.5;

/// A tiling of `rows × cols` base-sized tiles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AnyResGrid {
    pub rows: usize,
    pub cols: usize,
    pub base: usize,
}

/// Limits on the grid shapes a config may allow.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridLimits {
    pub max_side: usize,
    pub max_tiles: usize,
}

impl Default for GridLimits {
    fn default() -> Self {
        GridLimits { max_side: 4, max_tiles: 6 }
    }
}

/// `(rows, cols)` pairs: 1×1, 1×2, 2×1, 1×3, 3×1, 2×2, 1×4, 4×1.
pub const DEFAULT_ALLOWED: [(usize, usize); 8] = [(1, 1), (1, 2), (2, 1), (1, 3), (3, 1), (2, 2), (1, 4), (4, 1)];

pub fn validate_allowed(allowed: &[(usize, usize)], limits: GridLimits) -> Result<()> {
    let mut errs = Vec::new();
    if allowed.is_empty() {
        errs.push("allowed grid set is empty".to_string());
    }
    for &(r, c) in allowed {
        if r == 0 || c == 0 || r > limits.max_side || c > limits.max_side || r * c > limits.max_tiles {
            errs.push(format!("grid {r}x{c} violates limits (side <= {}, tiles <= {})", limits.max_side, limits.max_tiles));
        }
    }
    if errs.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(errs))
    }
}

/// Area accounting of an image of `w × h` pixels placed on a grid canvas.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fit {
    pub canvas: f64,
    /// Image area after the aspect-preserving fit.
    pub fitted: f64,
    /// `min(fitted, original)`: source pixels that survive the fit.
    pub effective: f64,
    pub original: f64,
}

impl Fit {
    /// Padding plus lost source resolution, in pixels.
    pub fn wasted(&self) -> f64 {
        (self.canvas - self.effective) + (self.original - self.effective)
    }

    /// Canvas share not carrying source pixels.
    pub fn wasted_fraction(&self) -> f64 {
        (self.canvas - self.effective) / self.canvas
    }
}

/// Scale factor and fitted size `(fw, fh)` of `w × h` inside `cw × ch`.
fn fit_size(w: usize, h: usize, cw: usize, ch: usize) -> (usize, usize) {
    let s = (cw as f64 / w as f64).min(ch as f64 / h as f64);
    let fw = ((w as f64 * s).round() as usize).clamp(1, cw);
    let fh = ((h as f64 * s).round() as usize).clamp(1, ch);
    (fw, fh)
}

impl AnyResGrid {
    pub fn canvas(&self) -> (usize, usize) {
        (self.cols * self.base, self.rows * self.base)
    }

    pub fn tiles(&self) -> usize {
        self.rows * self.cols
    }

    /// Crops produced by [`tile`]: every tile plus the thumbnail.
    pub fn crops(&self) -> usize {
        self.tiles() + 1
    }

    /// Visual tokens for a patch size: crops × (base / patch)².
    pub fn visual_tokens(&self, patch: usize) -> usize {
        self.crops() * (self.base / patch).pow(2)
    }

    pub fn fit(&self, w: usize, h: usize) -> Fit {
        let (cw, ch) = self.canvas();
        let s = (cw as f64 / w as f64).min(ch as f64 / h as f64);
        let original = (w * h) as f64;
        let fitted = original * s * s;
        Fit { canvas: (cw * ch) as f64, fitted, effective: fitted.min(original), original }
    }
}

/// Chooses the allowed `(rows, cols)` grid for an image `h` pixels tall and
/// `w` wide with the smallest share of canvas not covered by source pixels.
/// Ties go to more effective resolution, then fewer tiles, then
/// `rows <= cols`. Sizes are given height first, as in "336×1344".
pub fn select_grid(h: usize, w: usize, base: usize, allowed: &[(usize, usize)]) -> Result<AnyResGrid> {
    if w == 0 || h == 0 || base == 0 {
        return Err(Error::Contract(format!("select_grid needs positive sizes, got {h}x{w} base {base}")));
    }
    const EPS: f64 = 1e-12;
    let mut best: Option<(AnyResGrid, Fit)> = None;
    for &(rows, cols) in allowed {
        let g = AnyResGrid { rows, cols, base };
        let f = g.fit(w, h);
        let better = match &best {
            None => true,
            Some((b, bf)) => {
                let d = f.wasted_fraction() - bf.wasted_fraction();
                let e = (f.effective - bf.effective) / bf.effective;
                if d.abs() > EPS {
                    d < 0.0
                } else if e.abs() > EPS {
                    e > 0.0
                } else {
                    (g.tiles(), g.rows > g.cols) < (b.tiles(), b.rows > b.cols)
                }
            }
        };
        if better {
            best = Some((g, f));
        }
    }
    best.map(|b| b.0).ok_or_else(|| Error::Config("allowed grid set is empty".into()))
}

/// Aspect-preserving resize of `img` into `cw × ch`, centred on a grey pad.
pub fn letterbox(img: &Image, cw: usize, ch: usize) -> Image {
    let (fw, fh) = fit_size(img.width, img.height, cw, ch);
    let scaled = resize_to(img, fh, fw);
    let mut out = Image::filled(ch, cw, [PAD_VALUE; 3]);
    let (top, left) = ((ch - fh) / 2, (cw - fw) / 2);
    for y in 0..fh {
        let s = y * fw * 3;
        let d = ((top + y) * cw + left) * 3;
        out.data[d..d + fw * 3].copy_from_slice(&scaled.data[s..s + fw * 3]);
    }
    out
}

/// `rows·cols` base-sized tiles in row-major order followed by a global
/// base-sized thumbnail of the whole image.
pub fn tile(img: &Image, grid: &AnyResGrid) -> Result<Vec<Image>> {
    let (cw, ch) = grid.canvas();
    let canvas = letterbox(img, cw, ch);
    let mut crops = Vec::with_capacity(grid.crops());
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            crops.push(canvas.crop(r * grid.base, c * grid.base, grid.base, grid.base)?);
        }
    }
    crops.push(resize_to(img, grid.base, grid.base));
    Ok(crops)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        let g = |h, w| select_grid(h, w, 336, &DEFAULT_ALLOWED).unwrap();
        assert_eq!((g(672, 672).rows, g(672, 672).cols), (2, 2));
        assert_eq!((g(336, 1344).rows, g(336, 1344).cols), (1, 4));
        assert_eq!((g(1344, 336).rows, g(1344, 336).cols), (4, 1));
        assert_eq!((g(336, 336).rows, g(336, 336).cols), (1, 1));
    }

    #[test]
    fn crop_counts_and_tokens() {
        let img = Image::filled(20, 40, [0.1, 0.2, 0.3]);
        let two = AnyResGrid { rows: 2, cols: 2, base: 16 };
        assert_eq!(tile(&img, &two).unwrap().len(), 5);
        assert_eq!(tile(&img, &AnyResGrid { rows: 1, cols: 1, base: 16 }).unwrap().len(), 2);
        assert_eq!(AnyResGrid { rows: 2, cols: 2, base: 336 }.visual_tokens(14), 2880);
    }
}
