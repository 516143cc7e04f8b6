//! Raster type, file I/O and geometric primitives.

use std::path::Path;

use image::{ColorType, DynamicImage, ImageFormat};
use snowkit_tensor::Tensor;

use crate::error::{invalid, io_err, Error, Result};

/// Row-major, channel-interleaved raster with samples in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PixelRect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl PixelRect {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Self { x, y, w, h }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FileFormat {
    Png,
    /// Binary PPM (P6) for colour, PGM (P5) for grayscale.
    Pnm,
}

impl FileFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "png" => Some(Self::Png),
            "ppm" | "pgm" | "pnm" => Some(Self::Pnm),
            _ => None,
        }
    }
}

/// True for file names `load_image` understands.
pub fn is_image_file(path: &Path) -> bool {
    path.is_file() && FileFormat::from_path(path).is_some()
}

/// `round(v * 255)` with halves rounded up.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(invalid(format!("images have 1 or 3 channels, got {channels}")));
        }
        if height == 0 || width == 0 {
            return Err(invalid(format!("empty image {width}x{height}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "{} samples for a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid(format!("sample {v} outside [0, 1]")));
        }
        Ok(Self { height, width, channels, data })
    }

    /// Builds an image, clamping every sample into `[0, 1]` (NaN maps to 0).
    pub fn from_clamped(height: usize, width: usize, channels: usize, mut data: Vec<f64>) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(height, width, channels, data)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn from_fn(height: usize, width: usize, channels: usize, f: impl Fn(usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        (self.height, self.width, self.channels) == (other.height, other.width, other.channels)
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    /// Applies `f` to every sample and clamps the result into `[0, 1]`.
    pub fn map_clamped(&self, mut f: impl FnMut(f64) -> f64) -> Image {
        let data = self.data.iter().map(|&v| f(v).clamp(0.0, 1.0)).collect();
        Image { data, ..*self }
    }

    /// Samples after a save/load round trip.
    pub fn quantized(&self) -> Image {
        self.map_clamped(|v| f64::from(quantize(v)) / 255.0)
    }

    /// Gray images replicated to three channels; colour images unchanged.
    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Image { channels: 3, data, ..*self }
    }
}

pub fn load_image(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let decoded = image::load_from_memory(&bytes).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let (channels, samples) = match decoded.color() {
        ColorType::L8 | ColorType::La8 => (1, decoded.into_luma8().into_raw()),
        ColorType::Rgb8 | ColorType::Rgba8 => (3, decoded.into_rgb8().into_raw()),
        other => {
            return Err(Error::Decode {
                path: path.to_path_buf(),
                detail: format!("unsupported sample format {other:?}; only 8-bit gray and RGB are read"),
            })
        }
    };
    let data = samples.into_iter().map(|v| f64::from(v) / 255.0).collect();
    Image::new(h, w, channels, data)
}

pub fn save_image(img: &Image, path: &Path, format: FileFormat) -> Result<()> {
    let samples: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
    let (w, h) = (img.width as u32, img.height as u32);
    let encode_err = |e: image::ImageError| Error::Encode {
        path: path.to_path_buf(),
        detail: e.to_string(),
    };
    let dynamic = if img.channels == 1 {
        DynamicImage::ImageLuma8(image::GrayImage::from_raw(w, h, samples).expect("length checked by Image"))
    } else {
        DynamicImage::ImageRgb8(image::RgbImage::from_raw(w, h, samples).expect("length checked by Image"))
    };
    let mut buf = std::io::Cursor::new(Vec::new());
    let fmt = match format {
        FileFormat::Png => ImageFormat::Png,
        FileFormat::Pnm => ImageFormat::Pnm,
    };
    dynamic.write_to(&mut buf, fmt).map_err(encode_err)?;
    std::fs::write(path, buf.into_inner()).map_err(io_err(path))
}

pub fn crop(img: &Image, r: PixelRect) -> Result<Image> {
    if r.w == 0 || r.h == 0 || r.x + r.w > img.width || r.y + r.h > img.height {
        return Err(invalid(format!(
            "rect {}x{} at ({}, {}) outside {}x{} image",
            r.w, r.h, r.x, r.y, img.width, img.height
        )));
    }
    let c = img.channels;
    let mut data = Vec::with_capacity(r.w * r.h * c);
    for y in r.y..r.y + r.h {
        let start = img.index(y, r.x, 0);
        data.extend_from_slice(&img.data[start..start + r.w * c]);
    }
    Ok(Image { height: r.h, width: r.w, channels: c, data })
}

/// Source coordinate of output sample `i` when mapping `n_out` samples onto
/// `n_in` with the first and last samples aligned.
fn corner_aligned(i: usize, n_in: usize, n_out: usize) -> (usize, usize, f64) {
    if n_out == 1 || n_in == 1 {
        return (0, 0, 0.0);
    }
    let pos = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
    let lo = (pos.floor() as usize).min(n_in - 1);
    let hi = (lo + 1).min(n_in - 1);
    (lo, hi, pos - lo as f64)
}

pub fn resize_bilinear(img: &Image, out_w: usize, out_h: usize) -> Result<Image> {
    if out_w == 0 || out_h == 0 {
        return Err(invalid(format!("cannot resize to {out_w}x{out_h}")));
    }
    if out_w == img.width && out_h == img.height {
        return Ok(img.clone());
    }
    let c = img.channels;
    let cols: Vec<_> = (0..out_w).map(|x| corner_aligned(x, img.width, out_w)).collect();
    let mut data = Vec::with_capacity(out_w * out_h * c);
    for y in 0..out_h {
        let (y0, y1, fy) = corner_aligned(y, img.height, out_h);
        for &(x0, x1, fx) in &cols {
            for ch in 0..c {
                let top = img.get(y0, x0, ch) * (1.0 - fx) + img.get(y0, x1, ch) * fx;
                let bottom = img.get(y1, x0, ch) * (1.0 - fx) + img.get(y1, x1, ch) * fx;
                data.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
            }
        }
    }
    Ok(Image { height: out_h, width: out_w, channels: c, data })
}

pub fn flip_horizontal(img: &Image) -> Image {
    let c = img.channels;
    let mut data = Vec::with_capacity(img.data.len());
    for y in 0..img.height {
        for x in (0..img.width).rev() {
            let i = img.index(y, x, 0);
            data.extend_from_slice(&img.data[i..i + c]);
        }
    }
    Image { data, ..*img }
}

pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

pub fn to_grayscale(img: &Image) -> Image {
    if img.channels == 1 {
        return img.clone();
    }
    let data = img
        .data
        .chunks_exact(3)
        .map(|p| (LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2]).clamp(0.0, 1.0))
        .collect();
    Image { channels: 1, data, ..*img }
}

/// Stacks equally sized images into an `N x C x H x W` tensor.
pub fn images_to_tensor(images: &[&Image]) -> Result<Tensor> {
    let first = images.first().ok_or(Error::Empty("image batch"))?;
    let (h, w, c) = (first.height, first.width, first.channels);
    let mut data = Vec::with_capacity(images.len() * h * w * c);
    for img in images {
        if !img.same_shape(first) {
            return Err(Error::ShapeMismatch(format!(
                "batch mixes {}x{}x{} and {}x{}x{} images",
                w, h, c, img.width, img.height, img.channels
            )));
        }
        for ch in 0..c {
            data.extend(img.data.iter().skip(ch).step_by(c));
        }
    }
    Ok(Tensor::new(vec![images.len(), c, h, w], data)?)
}

/// Splits an `N x C x H x W` tensor into images, clamping into `[0, 1]`.
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<Image>> {
    let (n, c, h, w) = t.dims4("tensor_to_images")?;
    let plane = h * w;
    (0..n)
        .map(|b| {
            let base = b * c * plane;
            let mut data = Vec::with_capacity(c * plane);
            for p in 0..plane {
                for ch in 0..c {
                    data.push(t.data()[base + ch * plane + p]);
                }
            }
            Image::from_clamped(h, w, c, data)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, c: usize) -> Image {
        let n = (h * w * c) as f64;
        Image::from_fn(h, w, c, |y, x, ch| ((y * w + x) * c + ch) as f64 / n).unwrap()
    }

    #[test]
    fn constructor_checks_invariants() {
        assert!(Image::new(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(Image::new(1, 1, 2, vec![0.0; 2]).is_err());
        assert!(Image::new(1, 1, 1, vec![1.5]).is_err());
        assert!(Image::new(1, 1, 1, vec![f64::NAN]).is_err());
        assert_eq!(Image::from_clamped(1, 2, 1, vec![-1.0, 2.0]).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn quantize_rounds_half_up() {
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(127.4 / 255.0), 127);
    }

    #[test]
    fn crop_follows_index_arithmetic() {
        let img = ramp(768, 768, 3);
        let r = PixelRect::new(192, 192, 384, 384);
        let out = crop(&img, r).unwrap();
        assert_eq!((out.height(), out.width()), (384, 384));
        for (y, x, c) in [(0, 0, 0), (383, 383, 2), (10, 200, 1)] {
            assert_eq!(out.get(y, x, c), img.get(y + 192, x + 192, c));
        }
        assert_eq!(crop(&img, PixelRect::new(0, 0, 768, 768)).unwrap(), img);
        assert_eq!(crop(&img, PixelRect::new(0, 0, 1, 1)).unwrap().data(), &img.data()[..3]);
        assert!(crop(&img, PixelRect::new(500, 0, 300, 10)).is_err());
    }

    #[test]
    fn resize_corner_aligned_row_pattern() {
        let img = Image::new(2, 2, 1, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let out = resize_bilinear(&img, 4, 4).unwrap();
        for y in 0..4 {
            for (x, want) in [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0].into_iter().enumerate() {
                assert!((out.get(y, x, 0) - want).abs() < 1e-15);
            }
        }
        let c = Image::filled(5, 7, 3, 0.3).unwrap();
        let out = resize_bilinear(&c, 11, 2).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
        assert_eq!(resize_bilinear(&img, 2, 2).unwrap(), img);
        assert_eq!(resize_bilinear(&img, 1, 1).unwrap().data(), &[0.0]);
    }

    #[test]
    fn flip_and_grayscale() {
        let row = Image::new(1, 3, 1, vec![0.1, 0.2, 0.3]).unwrap();
        assert_eq!(flip_horizontal(&row).data(), &[0.3, 0.2, 0.1]);
        let img = ramp(4, 5, 3);
        assert_eq!(flip_horizontal(&flip_horizontal(&img)), img);

        let white = Image::filled(2, 2, 3, 1.0).unwrap();
        assert!(to_grayscale(&white).data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let red = Image::new(1, 1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(to_grayscale(&red).data(), &[0.299]);
        let gray = ramp(3, 3, 1);
        assert_eq!(to_grayscale(&gray), gray);
    }

    #[test]
    fn tensor_layout_round_trip() {
        let a = ramp(3, 4, 3);
        let b = flip_horizontal(&a);
        let t = images_to_tensor(&[&a, &b]).unwrap();
        assert_eq!(t.shape(), &[2, 3, 3, 4]);
        // channel-first: second sample of the tensor is pixel (0, 1) of channel 0
        assert_eq!(t.data()[1], a.get(0, 1, 0));
        assert_eq!(t.data()[12], a.get(0, 0, 1));
        assert_eq!(tensor_to_images(&t).unwrap(), vec![a, b]);
    }
}
