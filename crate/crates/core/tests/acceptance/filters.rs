//! Median and adaptive median against brute-force oracles.

use rand::Rng;
use snowkit::restore::{adaptive_median_filter, median_filter};
use snowkit::{rng, Image};

use crate::{ensure, Outcome};

const IMAGES: u64 = 100;

/// Sorted `k x k` neighbourhood with clamped coordinates.
fn window(img: &Image, y: usize, x: usize, c: usize, k: usize) -> Vec<f64> {
    let r = (k / 2) as i64;
    let mut v = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            let yy = (y as i64 + dy).max(0).min(img.height() as i64 - 1) as usize;
            let xx = (x as i64 + dx).max(0).min(img.width() as i64 - 1) as usize;
            v.push(img.get(yy, xx, c));
        }
    }
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v
}

fn oracle_median(img: &Image, k: usize) -> Image {
    Image::from_fn(img.height(), img.width(), img.channels(), |y, x, c| window(img, y, x, c, k)[k * k / 2]).unwrap()
}

/// Stage A grows the window while the median is an extreme; stage B keeps
/// the pixel unless it is itself an extreme of the last window examined.
fn oracle_adaptive(img: &Image, s_max: usize) -> Image {
    Image::from_fn(img.height(), img.width(), img.channels(), |y, x, c| {
        let z = img.get(y, x, c);
        let mut s = 3;
        let w = loop {
            let w = window(img, y, x, c, s);
            let (zmin, zmed, zmax) = (w[0], w[w.len() / 2], w[w.len() - 1]);
            let stage_a_done = zmed - zmin > 0.0 && zmed - zmax < 0.0;
            if stage_a_done || s == s_max {
                break w;
            }
            s += 2;
        };
        let (zmin, zmed, zmax) = (w[0], w[w.len() / 2], w[w.len() - 1]);
        if z - zmin > 0.0 && z - zmax < 0.0 {
            z
        } else {
            zmed
        }
    })
    .unwrap()
}

/// Random image with salt-and-pepper and quantized levels, so ties and
/// extreme medians actually occur.
fn test_image(seed: u64) -> Image {
    let mut r = rng::seeded(seed);
    let channels = if seed.is_multiple_of(3) { 1 } else { 3 };
    let levels = [4.0, 16.0, 256.0][(seed % 3) as usize];
    let impulse = r.random_range(0.0..0.4);
    let data = (0..16 * 16 * channels)
        .map(|_| {
            let u: f64 = r.random();
            if u < impulse / 2.0 {
                0.0
            } else if u < impulse {
                1.0
            } else {
                (r.random::<f64>() * levels).floor() / levels
            }
        })
        .collect();
    Image::new(16, 16, channels, data).unwrap()
}

pub fn run() -> Outcome {
    let mut compared = 0usize;
    for seed in 0..IMAGES {
        let img = test_image(seed);
        for k in [3, 5] {
            let got = median_filter(&img, k).map_err(|e| e.to_string())?;
            ensure(got == oracle_median(&img, k), || format!("median{k} differs on image {seed}"))?;
            compared += got.data().len();
        }
        for s_max in [3, 5, 7] {
            let got = adaptive_median_filter(&img, s_max).map_err(|e| e.to_string())?;
            ensure(got == oracle_adaptive(&img, s_max), || format!("adaptive s_max {s_max} differs on image {seed}"))?;
            compared += got.data().len();
        }
    }
    Ok(format!("{IMAGES} images, {compared} samples bit-identical (median 3/5, adaptive 3/5/7)"))
}
