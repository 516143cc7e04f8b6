//! Snow removal: median filters and U-Net inference, all exposed through the
//! [`Denoiser`] trait and looked up by name in a [`DenoiserRegistry`].

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::imagecore::{images_to_tensor, tensor_to_images, Image};
use crate::models::Network;

fn check_odd(what: &str, k: usize) -> Result<()> {
    if k >= 3 && k % 2 == 1 {
        Ok(())
    } else {
        Err(invalid(format!("{what} must be odd and at least 3, got {k}")))
    }
}

/// Fills `buf` with the `k x k` window around `(y, x)` of channel `c`,
/// replicating edge pixels.
fn gather(img: &Image, y: usize, x: usize, c: usize, k: usize, buf: &mut Vec<f64>) {
    let r = (k / 2) as isize;
    let (h, w) = (img.height() as isize, img.width() as isize);
    buf.clear();
    for dy in -r..=r {
        let yy = (y as isize + dy).clamp(0, h - 1) as usize;
        for dx in -r..=r {
            let xx = (x as isize + dx).clamp(0, w - 1) as usize;
            buf.push(img.get(yy, xx, c));
        }
    }
}

fn median_of(buf: &mut [f64]) -> f64 {
    let mid = buf.len() / 2;
    *buf.select_nth_unstable_by(mid, f64::total_cmp).1
}

/// Runs `f(y, x, c, scratch)` for every sample, rows in parallel.
fn per_sample(img: &Image, f: impl Fn(usize, usize, usize, &mut Vec<f64>) -> f64 + Sync) -> Result<Image> {
    let (w, c) = (img.width(), img.channels());
    let mut data = vec![0.0; img.data().len()];
    data.par_chunks_mut(w * c).enumerate().for_each(|(y, row)| {
        let mut scratch = Vec::new();
        for x in 0..w {
            for ch in 0..c {
                row[x * c + ch] = f(y, x, ch, &mut scratch);
            }
        }
    });
    Image::new(img.height(), w, c, data)
}

/// Channelwise `k x k` median with replicated borders.
pub fn median_filter(img: &Image, k: usize) -> Result<Image> {
    check_odd("median kernel size", k)?;
    per_sample(img, |y, x, c, buf| {
        gather(img, y, x, c, k, buf);
        median_of(buf)
    })
}

/// Two-stage adaptive median.
///
/// The window grows from 3x3 while its median equals the window minimum or
/// maximum, up to `s_max`. On the final window the pixel is kept when it is
/// strictly between the window extremes and replaced by the median otherwise.
pub fn adaptive_median_filter(img: &Image, s_max: usize) -> Result<Image> {
    check_odd("adaptive median maximum window", s_max)?;
    per_sample(img, |y, x, c, buf| {
        let z = img.get(y, x, c);
        let mut s = 3;
        loop {
            gather(img, y, x, c, s, buf);
            let lo = buf.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = buf.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let med = median_of(buf);
            if (lo < med && med < hi) || s + 2 > s_max {
                return if lo < z && z < hi { z } else { med };
            }
            s += 2;
        }
    })
}

/// Mirror index without repeating the edge sample (`... 2 1 0 1 2 ...`).
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Reflect-pads bottom and right edges up to multiples of `multiple`.
pub fn reflect_pad(img: &Image, multiple: usize) -> Result<Image> {
    let round_up = |n: usize| n.div_ceil(multiple) * multiple;
    let (h, w) = (round_up(img.height()), round_up(img.width()));
    if (h, w) == (img.height(), img.width()) {
        return Ok(img.clone());
    }
    Image::from_fn(h, w, img.channels(), |y, x, c| {
        img.get(reflect(y, img.height()), reflect(x, img.width()), c)
    })
}

/// Eval-mode U-Net inference on one image of any size.
pub fn unet_denoise(net: &Network, img: &Image) -> Result<Image> {
    let spec = net.spec();
    if spec.input.first() != Some(&img.channels()) {
        return Err(Error::ShapeMismatch(format!(
            "network expects {:?} channels, image has {}",
            spec.input.first(),
            img.channels()
        )));
    }
    let padded = reflect_pad(img, spec.spatial_multiple)?;
    let out = net.predict(&images_to_tensor(&[&padded])?)?;
    let restored = tensor_to_images(&out)?.pop().expect("batch of one");
    crate::imagecore::crop(&restored, crate::imagecore::PixelRect::new(0, 0, img.width(), img.height()))
}

pub trait Denoiser: Send + Sync {
    fn name(&self) -> &str;
    fn denoise(&self, img: &Image) -> Result<Image>;
}

pub struct Median {
    name: String,
    k: usize,
}

impl Median {
    pub fn new(k: usize) -> Result<Self> {
        check_odd("median kernel size", k)?;
        Ok(Self { name: format!("median{k}"), k })
    }
}

impl Denoiser for Median {
    fn name(&self) -> &str {
        &self.name
    }

    fn denoise(&self, img: &Image) -> Result<Image> {
        median_filter(img, self.k)
    }
}

pub struct AdaptiveMedian {
    name: String,
    s_max: usize,
}

impl AdaptiveMedian {
    pub fn new(name: impl Into<String>, s_max: usize) -> Result<Self> {
        check_odd("adaptive median maximum window", s_max)?;
        Ok(Self { name: name.into(), s_max })
    }
}

impl Denoiser for AdaptiveMedian {
    fn name(&self) -> &str {
        &self.name
    }

    fn denoise(&self, img: &Image) -> Result<Image> {
        adaptive_median_filter(img, self.s_max)
    }
}

pub struct UnetDenoiser {
    net: Network,
}

impl UnetDenoiser {
    pub fn new(net: Network) -> Self {
        Self { net }
    }
}

impl Denoiser for UnetDenoiser {
    fn name(&self) -> &str {
        "unet"
    }

    fn denoise(&self, img: &Image) -> Result<Image> {
        unet_denoise(&self.net, img)
    }
}

/// Default maximum window of the `adaptive` method.
pub const ADAPTIVE_DEFAULT_S_MAX: usize = 5;

pub const CLASSICAL_METHODS: [&str; 5] = ["median3", "median5", "adaptive", "adaptive3", "adaptive5"];

#[derive(Default)]
pub struct DenoiserRegistry {
    entries: BTreeMap<String, Box<dyn Denoiser>>,
}

impl DenoiserRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry holding every method in [`CLASSICAL_METHODS`].
    pub fn classical() -> Self {
        let mut r = Self::new();
        let builtins: [Box<dyn Denoiser>; 5] = [
            Box::new(Median::new(3).expect("odd")),
            Box::new(Median::new(5).expect("odd")),
            Box::new(AdaptiveMedian::new("adaptive", ADAPTIVE_DEFAULT_S_MAX).expect("odd")),
            Box::new(AdaptiveMedian::new("adaptive3", 3).expect("odd")),
            Box::new(AdaptiveMedian::new("adaptive5", 5).expect("odd")),
        ];
        for d in builtins {
            r.register(d).expect("builtin names are unique");
        }
        r
    }

    pub fn register(&mut self, denoiser: Box<dyn Denoiser>) -> Result<()> {
        let name = denoiser.name().to_string();
        if self.entries.contains_key(&name) {
            return Err(invalid(format!("denoiser {name} is already registered")));
        }
        self.entries.insert(name, denoiser);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&dyn Denoiser> {
        self.entries.get(name).map(|d| d.as_ref())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}
