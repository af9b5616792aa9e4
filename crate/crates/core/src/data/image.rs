use crate::error::{dim_err, Error, Result};
use crate::numerics::{Scalar, Tensor};

/// RGB image, row-major `[height, width, 3]`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * 3 {
            return Err(dim_err!("image {height}x{width} needs {} values, got {}", height * width * 3, data.len()));
        }
        Ok(Image { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        Image { height, width, data: (0..height * width).flat_map(|_| rgb).collect() }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, bytes.iter().map(|&b| f32::from(b) / 255.0).collect())
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    /// Encodes as an 8-bit RGB PNG.
    pub fn to_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().map_err(|e| Error::Data(format!("png encode: {e}")))?;
            w.write_image_data(&self.to_rgb8()).map_err(|e| Error::Data(format!("png encode: {e}")))?;
        }
        Ok(out)
    }

    /// Decodes 8-bit RGB, RGBA, gray or gray-alpha PNGs (alpha is dropped).
    pub fn from_png(bytes: &[u8]) -> Result<Self> {
        let mut dec = png::Decoder::new(bytes);
        dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = dec.read_info().map_err(|e| Error::Data(format!("png decode: {e}")))?;
        let mut buf = vec![0; reader.output_buffer_size()];
        let info = reader.next_frame(&mut buf).map_err(|e| Error::Data(format!("png decode: {e}")))?;
        let (w, h) = (info.width as usize, info.height as usize);
        let px = &buf[..info.buffer_size()];
        let rgb: Vec<u8> = match info.color_type {
            png::ColorType::Rgb => px.to_vec(),
            png::ColorType::Rgba => px.chunks(4).flat_map(|c| [c[0], c[1], c[2]]).collect(),
            png::ColorType::Grayscale => px.iter().flat_map(|&g| [g, g, g]).collect(),
            png::ColorType::GrayscaleAlpha => px.chunks(2).flat_map(|c| [c[0], c[0], c[0]]).collect(),
            other => return Err(Error::Data(format!("unsupported png color type {other:?}"))),
        };
        Self::from_rgb8(h, w, &rgb)
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                let (s, d) = ((y * self.width + x) * 3, (y * self.width + self.width - 1 - x) * 3);
                out.data[d..d + 3].copy_from_slice(&self.data[s..s + 3]);
            }
        }
        out
    }

    /// Copies a `height×width` window starting at `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(dim_err!("crop {height}x{width}@({top},{left}) outside {}x{}", self.height, self.width));
        }
        let mut data = Vec::with_capacity(height * width * 3);
        for y in top..top + height {
            let s = (y * self.width + left) * 3;
            data.extend_from_slice(&self.data[s..s + width * 3]);
        }
        Image::new(height, width, data)
    }
}

/// Bilinear resize with half-pixel centres; edges clamp.
pub fn resize_to(img: &Image, height: usize, width: usize) -> Image {
    if height == img.height && width == img.width {
        return img.clone();
    }
    let sy = img.height as f64 / height as f64;
    let sx = img.width as f64 / width as f64;
    let axis = |o: usize, scale: f64, len: usize| {
        let c = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (c.floor() as usize).min(len - 1);
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, (c - i0 as f64).clamp(0.0, 1.0))
    };
    let mut data = Vec::with_capacity(height * width * 3);
    for y in 0..height {
        let (y0, y1, fy) = axis(y, sy, img.height);
        for x in 0..width {
            let (x0, x1, fx) = axis(x, sx, img.width);
            let (a, b, c, d) = (img.pixel(y0, x0), img.pixel(y0, x1), img.pixel(y1, x0), img.pixel(y1, x1));
            for ch in 0..3 {
                let top = f64::from(a[ch]) * (1.0 - fx) + f64::from(b[ch]) * fx;
                let bot = f64::from(c[ch]) * (1.0 - fx) + f64::from(d[ch]) * fx;
                data.push(((top * (1.0 - fy) + bot * fy) as f32).clamp(0.0, 1.0));
            }
        }
    }
    Image { height, width, data }
}

/// Square bilinear resize to `target×target`.
pub fn resize(img: &Image, target: usize) -> Result<Image> {
    if target < 8 {
        return Err(Error::Contract(format!("resize target {target} is below 8 px")));
    }
    Ok(resize_to(img, target, target))
}

/// Stacks equally sized images into `[N, H, W, 3]`.
pub fn stack_images<T: Scalar>(images: &[&Image]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| dim_err!("cannot stack zero images"))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * h * w * 3);
    for img in images {
        if img.height != h || img.width != w {
            return Err(dim_err!("cannot stack {}x{} with {h}x{w}", img.height, img.width));
        }
        data.extend(img.data.iter().map(|&v| T::lit(f64::from(v))));
    }
    Tensor::new(vec![images.len(), h, w, 3], data)
}
