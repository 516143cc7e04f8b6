//! Short WGAN runs on procedural blobs: clipping, finiteness, output range
//! and movement of the generated brightness towards the real one.

use snowkit::degrade::PatchSet;
use snowkit::models::{generate_patches, CriticConfig, GeneratorConfig, Network};
use snowkit::train::{init_wgan, sample_latent, train_wgan, TrainConfig};

use crate::{ensure, Outcome};

const STEPS: usize = 200;
const SEEDS: [u64; 3] = [1, 2, 3];
const BATCH: usize = 16;
const SAMPLES: usize = 256;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn mean_brightness(p: &PatchSet) -> f64 {
    p.patches().iter().map(|i| i.data().iter().sum::<f64>()).sum::<f64>() / (p.len() * p.patches()[0].data().len()) as f64
}

fn generated_brightness(g: &Network) -> Result<f64, String> {
    Ok(mean_brightness(&generate_patches(g, SAMPLES, 12345).map_err(err)?))
}

pub fn run() -> Outcome {
    let real = PatchSet::procedural(SAMPLES, 5).map_err(err)?;
    let real_mean = mean_brightness(&real);
    let (gen_cfg, critic_cfg) = (GeneratorConfig::default(), CriticConfig::default());
    let mut shrinks = Vec::new();
    for seed in SEEDS {
        let cfg = TrainConfig { seed, batch_size: BATCH, steps_per_epoch: Some(STEPS), ..TrainConfig::wgan() };
        let (g0, _) = init_wgan(gen_cfg, critic_cfg, seed).map_err(err)?;
        let gap0 = (generated_brightness(&g0)? - real_mean).abs();

        let mut steps = 0;
        let mut max_w: f64 = 0.0;
        let mut finite = true;
        let out = train_wgan(&real, gen_cfg, critic_cfg, &cfg, None, &mut |s| {
            steps += 1;
            max_w = max_w.max(s.max_abs_critic_weight);
            finite &= s.critic_loss.is_finite() && s.generator_loss.is_finite();
        })
        .map_err(err)?;
        ensure(steps == STEPS && finite, || format!("seed {seed}: {steps} steps, finite losses {finite}"))?;
        ensure(max_w <= cfg.clip, || format!("seed {seed}: critic weight {max_w} after a step"))?;
        ensure(out.critic.params().max_abs_trainable() <= cfg.clip, || format!("seed {seed}: final critic unclipped"))?;

        let z = sample_latent(&mut snowkit::rng::seeded(seed), 64, gen_cfg.z_dim).map_err(err)?;
        let raw = out.generator.predict(&z).map_err(err)?;
        ensure(raw.data().iter().all(|v| v.abs() < 1.0), || format!("seed {seed}: generator output leaves (-1, 1)"))?;

        let gap1 = (generated_brightness(&out.generator)? - real_mean).abs();
        shrinks.push(1.0 - gap1 / gap0);
    }
    let good = shrinks.iter().filter(|&&s| s >= 0.2).count();
    let shown = shrinks.iter().map(|s| format!("{:.0}%", 100.0 * s)).collect::<Vec<_>>().join(", ");
    ensure(good >= 2, || format!("brightness gap shrank by {shown}"))?;
    Ok(format!(
        "{} seeds x {STEPS} steps: losses finite, critic weights within 0.01, outputs in (-1, 1); \
         brightness gap to real mean {real_mean:.3} shrank by {shown}",
        SEEDS.len()
    ))
}
