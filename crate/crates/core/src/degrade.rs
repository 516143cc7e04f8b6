//! Additive marine-snow compositing and the three noise processes.
//!
//! `J = min(1, I + Σ τᵢ Pᵢ)` followed by impulse, Gaussian and Poisson noise,
//! in that order.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, Error, Result};
use crate::imagecore::{is_image_file, load_image, resize_bilinear, to_grayscale, Image};
use crate::rng;

pub const PATCH_SIDE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchSource {
    Loaded,
    Generated,
    Procedural,
}

/// Non-empty set of 32x32 single-channel snow patches.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    patches: Vec<Image>,
    source: PatchSource,
}

impl PatchSet {
    pub fn new(patches: Vec<Image>, source: PatchSource) -> Result<Self> {
        if patches.is_empty() {
            return Err(Error::Empty("patch set"));
        }
        for (i, p) in patches.iter().enumerate() {
            if (p.height(), p.width(), p.channels()) != (PATCH_SIDE, PATCH_SIDE, 1) {
                return Err(Error::ShapeMismatch(format!(
                    "patch {i} is {}x{}x{}, expected {PATCH_SIDE}x{PATCH_SIDE}x1",
                    p.width(),
                    p.height(),
                    p.channels()
                )));
            }
        }
        Ok(Self { patches, source })
    }

    /// Every PNG/PGM/PPM in `dir`, sorted by file name, converted to gray and
    /// resized to 32x32.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let files = list_images(dir)?;
        let patches = files
            .iter()
            .map(|path| {
                let gray = to_grayscale(&load_image(path)?);
                resize_bilinear(&gray, PATCH_SIDE, PATCH_SIDE)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(patches, PatchSource::Loaded)
    }

    /// Soft Gaussian blobs with random centre, width and peak brightness.
    pub fn procedural(n: usize, seed: u64) -> Result<Self> {
        let mut r = rng::seeded(seed);
        let patches = (0..n)
            .map(|_| {
                let cy = r.random_range(12.0..20.0);
                let cx = r.random_range(12.0..20.0);
                let sigma: f64 = r.random_range(2.0..6.0);
                let peak = r.random_range(0.6..1.0);
                Image::from_fn(PATCH_SIDE, PATCH_SIDE, 1, |y, x, _| {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    peak * (-d2 / (2.0 * sigma * sigma)).exp()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(patches, PatchSource::Procedural)
    }

    pub fn patches(&self) -> &[Image] {
        &self.patches
    }

    pub fn source(&self) -> PatchSource {
        self.source
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

/// Image files directly inside `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_image_file(p))
        .collect();
    files.sort();
    Ok(files)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub patch_index: usize,
    pub x: usize,
    pub y: usize,
    pub m: usize,
    pub tau: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradeRecipe {
    pub placements: Vec<Placement>,
    pub impulse_density: f64,
    pub gaussian_sigma: f64,
    pub poisson_lambda: f64,
    pub seed: u64,
}

/// Sampling ranges and noise strengths. Integer ranges are inclusive;
/// `tau` is drawn from `(tau_min, tau_max]`. A zero noise parameter disables
/// that stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DegradeParams {
    pub n_min: usize,
    pub n_max: usize,
    pub m_min: usize,
    pub m_max: usize,
    pub tau_min: f64,
    pub tau_max: f64,
    pub impulse_density: f64,
    pub gaussian_sigma: f64,
    pub poisson_lambda: f64,
}

impl Default for DegradeParams {
    fn default() -> Self {
        Self {
            n_min: 1,
            n_max: 200,
            m_min: 4,
            m_max: 32,
            tau_min: 0.5,
            tau_max: 1.5,
            impulse_density: 0.001,
            gaussian_sigma: 10.0 / 255.0,
            poisson_lambda: 0.2,
        }
    }
}

impl DegradeParams {
    /// No placements and every noise stage off.
    pub fn identity() -> Self {
        Self {
            n_min: 0,
            n_max: 0,
            impulse_density: 0.0,
            gaussian_sigma: 0.0,
            poisson_lambda: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n_min > self.n_max {
            problems.push(format!("n_min {} > n_max {}", self.n_min, self.n_max));
        }
        if self.m_min < 1 || self.m_min > self.m_max {
            problems.push(format!("patch size range [{}, {}] is empty", self.m_min, self.m_max));
        }
        if !(self.tau_min.is_finite() && self.tau_max.is_finite() && self.tau_min >= 0.0 && self.tau_min < self.tau_max) {
            problems.push(format!("tau range ({}, {}] is invalid", self.tau_min, self.tau_max));
        }
        if !(0.0..=1.0).contains(&self.impulse_density) {
            problems.push(format!("impulse density {} outside [0, 1]", self.impulse_density));
        }
        if !(self.gaussian_sigma >= 0.0 && self.gaussian_sigma.is_finite()) {
            problems.push(format!("gaussian sigma {} must be >= 0", self.gaussian_sigma));
        }
        if !(self.poisson_lambda >= 0.0 && self.poisson_lambda.is_finite()) {
            problems.push(format!("poisson lambda {} must be >= 0", self.poisson_lambda));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(invalid(problems.join("; ")))
        }
    }
}

/// Draws a placement plan for a `width x height` target.
pub fn sample_recipe<R: Rng + ?Sized>(
    rng: &mut R,
    params: &DegradeParams,
    width: usize,
    height: usize,
    patch_count: usize,
    seed: u64,
) -> Result<DegradeRecipe> {
    params.validate()?;
    if width.min(height) < params.m_max {
        return Err(invalid(format!(
            "target {width}x{height} is smaller than the largest patch size {}",
            params.m_max
        )));
    }
    if patch_count == 0 && params.n_max > 0 {
        return Err(Error::Empty("patch set"));
    }
    let n = rng.random_range(params.n_min..=params.n_max);
    let placements = (0..n)
        .map(|_| {
            let patch_index = rng.random_range(0..patch_count);
            let m = rng.random_range(params.m_min..=params.m_max);
            // 1 - u maps [0, 1) onto (0, 1]
            let u: f64 = rng.random();
            let tau = params.tau_min + (1.0 - u) * (params.tau_max - params.tau_min);
            let x = rng.random_range(0..=width - m);
            let y = rng.random_range(0..=height - m);
            Placement { patch_index, x, y, m, tau }
        })
        .collect();
    Ok(DegradeRecipe {
        placements,
        impulse_density: params.impulse_density,
        gaussian_sigma: params.gaussian_sigma,
        poisson_lambda: params.poisson_lambda,
        seed,
    })
}

pub fn composite(img: &Image, patches: &PatchSet, recipe: &DegradeRecipe) -> Result<Image> {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let mut acc = vec![0.0; h * w];
    for (i, p) in recipe.placements.iter().enumerate() {
        if p.m == 0 || p.x + p.m > w || p.y + p.m > h {
            return Err(invalid(format!("placement {i} ({}x{} at {}, {}) leaves the image", p.m, p.m, p.x, p.y)));
        }
        let patch = patches
            .patches()
            .get(p.patch_index)
            .ok_or_else(|| invalid(format!("placement {i} references patch {} of {}", p.patch_index, patches.len())))?;
        let resized = resize_bilinear(patch, p.m, p.m)?;
        for py in 0..p.m {
            for px in 0..p.m {
                acc[(p.y + py) * w + p.x + px] += p.tau * resized.get(py, px, 0);
            }
        }
    }
    let data = img
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| (v + acc[i / c]).min(1.0))
        .collect();
    Image::new(h, w, c, data)
}

/// Sets each pixel location to 1 on every channel with probability `density`.
pub fn impulse_noise<R: Rng + ?Sized>(img: &Image, density: f64, rng: &mut R) -> Result<Image> {
    if !(0.0..=1.0).contains(&density) {
        return Err(invalid(format!("impulse density {density} outside [0, 1]")));
    }
    if density == 0.0 {
        return Ok(img.clone());
    }
    let c = img.channels();
    let mut data = img.data().to_vec();
    for px in data.chunks_exact_mut(c) {
        if rng.random::<f64>() < density {
            px.fill(1.0);
        }
    }
    Image::new(img.height(), img.width(), c, data)
}

pub fn gaussian_noise<R: Rng + ?Sized>(img: &Image, sigma: f64, rng: &mut R) -> Result<Image> {
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| invalid(format!("gaussian sigma {sigma}: {e}")))?;
    Ok(img.map_clamped(|v| v + normal.sample(rng)))
}

/// One draw of `λ · Poisson(x / λ)` without clamping.
pub fn poisson_sample<R: Rng + ?Sized>(x: f64, lambda: f64, rng: &mut R) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let dist = Poisson::new(x / lambda).expect("positive finite rate");
    lambda * dist.sample(rng)
}

pub fn poisson_noise<R: Rng + ?Sized>(img: &Image, lambda: f64, rng: &mut R) -> Result<Image> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(invalid(format!("poisson lambda {lambda} must be positive")));
    }
    Ok(img.map_clamped(|v| poisson_sample(v, lambda, rng)))
}

/// Replays a recipe: compositing, then each enabled noise stage.
///
/// Noise draws come from a stream of `recipe.seed` separate from the one used
/// for sampling placements, so a stored recipe reproduces its image exactly.
pub fn apply_recipe(img: &Image, patches: &PatchSet, recipe: &DegradeRecipe) -> Result<Image> {
    let mut out = composite(img, patches, recipe)?;
    let mut noise_rng = rng::seeded_stream(recipe.seed, NOISE_STREAM);
    if recipe.impulse_density > 0.0 {
        out = impulse_noise(&out, recipe.impulse_density, &mut noise_rng)?;
    }
    if recipe.gaussian_sigma > 0.0 {
        out = gaussian_noise(&out, recipe.gaussian_sigma, &mut noise_rng)?;
    }
    if recipe.poisson_lambda > 0.0 {
        out = poisson_noise(&out, recipe.poisson_lambda, &mut noise_rng)?;
    }
    Ok(out)
}

const PLACEMENT_STREAM: u64 = 0;
const NOISE_STREAM: u64 = 1;

pub fn degrade(img: &Image, patches: &PatchSet, params: &DegradeParams, seed: u64) -> Result<(Image, DegradeRecipe)> {
    let mut placement_rng = rng::seeded_stream(seed, PLACEMENT_STREAM);
    let recipe = sample_recipe(&mut placement_rng, params, img.width(), img.height(), patches.len(), seed)?;
    let out = apply_recipe(img, patches, &recipe)?;
    Ok((out, recipe))
}
