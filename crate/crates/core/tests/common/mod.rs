//! Synthetic fixtures shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use snowkit::degrade::{degrade, DegradeParams, PatchSet};
use snowkit::rng;
use snowkit::Image;

/// Smooth colour scene: a few random low-frequency waves per channel plus a
/// soft-edged rectangle.
pub fn scene(h: usize, w: usize, seed: u64) -> Image {
    let mut r = rng::seeded(seed);
    let waves: Vec<[f64; 4]> = (0..9)
        .map(|_| {
            [
                r.random_range(0.5..3.0),
                r.random_range(0.5..3.0),
                r.random_range(0.0..std::f64::consts::TAU),
                r.random_range(0.05..0.15),
            ]
        })
        .collect();
    let base: [f64; 3] = [r.random_range(0.15..0.45), r.random_range(0.25..0.55), r.random_range(0.3..0.6)];
    let (y0, x0) = (r.random_range(0.1..0.5), r.random_range(0.1..0.5));
    let (y1, x1) = (y0 + r.random_range(0.2..0.4), x0 + r.random_range(0.2..0.4));
    let shade = r.random_range(-0.15..0.15);
    Image::from_fn(h, w, 3, |y, x, c| {
        let (v, u) = (y as f64 / h as f64, x as f64 / w as f64);
        let mut val = base[c];
        for wave in &waves[c * 3..c * 3 + 3] {
            val += wave[3] * (std::f64::consts::TAU * (wave[0] * u + wave[1] * v) + wave[2]).sin();
        }
        if (y0..y1).contains(&v) && (x0..x1).contains(&u) {
            val += shade;
        }
        val.clamp(0.0, 1.0)
    })
    .expect("valid scene")
}

/// `(clean, distorted)` pairs built with the default degradation.
pub fn synthetic_pairs(n: usize, side: usize, seed: u64) -> Vec<(Image, Image)> {
    let patches = PatchSet::procedural(64, rng::derive_seed(seed, u64::MAX)).expect("patches");
    let params = DegradeParams::default();
    (0..n as u64)
        .map(|i| {
            let clean = scene(side, side, rng::derive_seed(seed, 2 * i));
            let (distorted, _) = degrade(&clean, &patches, &params, rng::derive_seed(seed, 2 * i + 1)).expect("degrade");
            (clean, distorted)
        })
        .collect()
}

/// Uniform random single-channel image.
pub fn noise_image(h: usize, w: usize, c: usize, seed: u64) -> Image {
    let mut r = rng::seeded(seed);
    Image::new(h, w, c, (0..h * w * c).map(|_| r.random::<f64>()).collect()).expect("valid")
}
