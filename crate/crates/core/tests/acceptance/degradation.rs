//! Compositing invariants, pipeline determinism and noise statistics.

use rand::Rng;
use snowkit::degrade::{
    apply_recipe, composite, degrade, gaussian_noise, impulse_noise, poisson_noise, poisson_sample, sample_recipe,
    DegradeParams, PatchSet,
};
use snowkit::{rng, Image};

use crate::common::{noise_image, scene};
use crate::{ensure, Outcome};

fn err(e: snowkit::Error) -> String {
    e.to_string()
}

fn composite_invariants(patches: &PatchSet) -> Result<usize, String> {
    let params = DegradeParams::default();
    let mut r = rng::seeded(100);
    let mut placements = 0;
    for i in 0..1000u64 {
        let (h, w) = (r.random_range(32..72), r.random_range(32..72));
        let c = if i % 4 == 0 { 1 } else { 3 };
        let img = noise_image(h, w, c, 1000 + i);
        let recipe = sample_recipe(&mut r, &params, w, h, patches.len(), i).map_err(err)?;
        placements += recipe.placements.len();
        let out = composite(&img, patches, &recipe).map_err(err)?;
        let ok = out.data().iter().zip(img.data()).all(|(&o, &x)| (0.0..=1.0).contains(&o) && o >= x);
        ensure(ok, || format!("recipe {i} leaves [0, 1] or darkens a pixel"))?;
    }
    Ok(placements)
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
}

pub fn run() -> Outcome {
    let patches = PatchSet::procedural(16, 3).map_err(err)?;
    let placements = composite_invariants(&patches)?;

    let clean = scene(96, 80, 5);
    let params = DegradeParams::default();
    let (a, recipe) = degrade(&clean, &patches, &params, 42).map_err(err)?;
    let (b, _) = degrade(&clean, &patches, &params, 42).map_err(err)?;
    let replay = apply_recipe(&clean, &patches, &recipe).map_err(err)?;
    let (other, _) = degrade(&clean, &patches, &params, 43).map_err(err)?;
    ensure(a == b && a == replay && a != other, || "degrade is not reproducible from its seed".into())?;
    ensure(a.data().iter().all(|v| (0.0..=1.0).contains(v)), || "degraded image leaves [0, 1]".into())?;

    let mut r = rng::seeded(7);
    let black = Image::filled(256, 256, 3, 0.0).unwrap();
    let salted = impulse_noise(&black, 0.01, &mut r).map_err(err)?;
    let hits = salted.data().chunks(3).filter(|p| p.iter().all(|&v| v == 1.0)).count();
    let frac = hits as f64 / (256.0 * 256.0);
    ensure((0.005..=0.015).contains(&frac), || format!("impulse fraction {frac}"))?;

    let sigma = 10.0 / 255.0;
    let flat = Image::filled(1000, 1000, 1, 0.5).unwrap();
    let noisy = gaussian_noise(&flat, sigma, &mut r).map_err(err)?;
    let (_, var) = mean_var(noisy.data());
    let std_ratio = var.sqrt() / sigma;
    ensure((std_ratio - 1.0).abs() <= 0.02, || format!("gaussian std ratio {std_ratio}"))?;

    let draws: Vec<f64> = (0..1_000_000).map(|_| poisson_sample(0.5, 0.2, &mut r)).collect();
    let (pm, pv) = mean_var(&draws);
    ensure((pm / 0.5 - 1.0).abs() <= 0.01 && (pv / 0.1 - 1.0).abs() <= 0.05, || {
        format!("poisson mean {pm}, variance {pv}")
    })?;
    let img = noise_image(64, 64, 3, 9);
    let faint = poisson_noise(&img, 1e-6, &mut r).map_err(err)?;
    let rms = (faint.data().iter().zip(img.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / img.data().len() as f64).sqrt();
    ensure(rms <= 1e-2, || format!("poisson rms at lambda 1e-6 is {rms}"))?;

    let mut n_sum = 0.0;
    let (mut tau_sum, mut m_sum, mut count) = (0.0, 0.0, 0.0);
    const RECIPES: usize = 10_000;
    for i in 0..RECIPES {
        let rec = sample_recipe(&mut r, &params, 64, 64, 4, i as u64).map_err(err)?;
        n_sum += rec.placements.len() as f64;
        for p in &rec.placements {
            tau_sum += p.tau;
            m_sum += p.m as f64;
            count += 1.0;
        }
    }
    let n_mean = n_sum / RECIPES as f64;
    let n_sd = ((200.0f64 * 200.0 - 1.0) / 12.0 / RECIPES as f64).sqrt();
    let tau_mean = tau_sum / count;
    let tau_sd = (1.0f64 / 12.0 / count).sqrt();
    let m_mean = m_sum / count;
    let m_sd = ((29.0f64 * 29.0 - 1.0) / 12.0 / count).sqrt();
    ensure(
        (n_mean - 100.5).abs() <= 3.0 * n_sd && (tau_mean - 1.0).abs() <= 3.0 * tau_sd && (m_mean - 18.0).abs() <= 3.0 * m_sd,
        || format!("recipe means N {n_mean}, tau {tau_mean}, m {m_mean}"),
    )?;

    Ok(format!(
        "1000 recipes ({placements} placements) monotone and in range; seeded pipeline replays; \
         impulse {frac:.4}, gaussian std ratio {std_ratio:.4}, poisson mean {pm:.4} var {pv:.4}, \
         recipe means N {n_mean:.2} tau {tau_mean:.4} m {m_mean:.2}"
    ))
}
