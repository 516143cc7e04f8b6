//! Training loops: Wasserstein GAN for snow patches and the U-Net remover.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use snowkit_tensor::loss::{combined_loss_node, critic_loss_node, generator_loss_node};
use snowkit_tensor::{clip_weights, AdamConfig, FeatureExtractor, Graph, OptimizerConfig, RmsPropConfig, Tensor};

use crate::dataset::{load_split, Manifest, Split};
use crate::degrade::PatchSet;
use crate::error::{invalid, io_err, Error, Result};
use crate::imagecore::{images_to_tensor, Image};
use crate::models::{build_critic, build_generator, build_unet, CriticConfig, ForwardCtx, GeneratorConfig, Mode, Network, UnetConfig};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    /// Critic updates per generator update.
    pub n_critic: usize,
    /// Critic weight clipping bound.
    pub clip: f64,
    /// Weight of the perceptual term.
    pub gamma: f64,
    /// Write `epoch_<k>.msnw` every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    /// Recorded for replay. Training itself is single-threaded and always
    /// reproducible for a fixed seed.
    pub deterministic: bool,
    /// Optimizer steps per epoch; defaults to one pass over the data.
    pub steps_per_epoch: Option<usize>,
}

impl TrainConfig {
    pub fn wgan() -> Self {
        Self {
            epochs: 1,
            batch_size: 64,
            seed: 0,
            optimizer: OptimizerConfig::Rmsprop(RmsPropConfig::default()),
            n_critic: 5,
            clip: 0.01,
            gamma: 1.0,
            checkpoint_every: 0,
            deterministic: true,
            steps_per_epoch: None,
        }
    }

    pub fn unet() -> Self {
        Self {
            batch_size: 16,
            optimizer: OptimizerConfig::Adam(AdamConfig::default()),
            ..Self::wgan()
        }
    }

    /// Reports every violated constraint at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.epochs == 0 {
            problems.push("epochs must be at least 1".to_string());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be at least 1".to_string());
        }
        if self.n_critic == 0 {
            problems.push("n_critic must be at least 1".to_string());
        }
        if !(self.clip > 0.0 && self.clip.is_finite()) {
            problems.push(format!("clip must be positive, got {}", self.clip));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            problems.push(format!("gamma must be non-negative, got {}", self.gamma));
        }
        if !(self.optimizer.lr() > 0.0 && self.optimizer.lr().is_finite()) {
            problems.push(format!("learning rate must be positive, got {}", self.optimizer.lr()));
        }
        if self.steps_per_epoch == Some(0) {
            problems.push("steps_per_epoch must be at least 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(invalid(problems.join("; ")))
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::unet()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

/// Per-epoch losses. For the GAN `train_loss` holds the mean critic loss
/// and `val_loss` the mean generator loss.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_loss,seconds";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.records {
            out.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.val_loss, r.seconds));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |detail: String| Error::Format { what: "history CSV", detail };
        let mut lines = text.lines();
        if lines.next() != Some(Self::CSV_HEADER) {
            return Err(bad("missing header".into()));
        }
        let records = lines
            .enumerate()
            .map(|(i, line)| {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 4 {
                    return Err(bad(format!("line {} has {} fields", i + 2, f.len())));
                }
                let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("line {}: {e}", i + 2)));
                Ok(EpochRecord {
                    epoch: f[0].parse().map_err(|e| bad(format!("line {}: {e}", i + 2)))?,
                    train_loss: num(f[1])?,
                    val_loss: num(f[2])?,
                    seconds: num(f[3])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { records })
    }
}

pub fn export_history(history: &History, path: &Path) -> Result<()> {
    std::fs::write(path, history.to_csv()).map_err(io_err(path))
}

fn ensure_finite(v: f64, what: &'static str, step: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { what, step })
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("config serializes");
    std::fs::write(path, text).map_err(io_err(path))
}

/// Progress of one generator update.
#[derive(Clone, Copy, Debug)]
pub struct WganStep {
    pub step: usize,
    pub epoch: usize,
    /// Critic loss of the last critic update before this generator update.
    pub critic_loss: f64,
    pub generator_loss: f64,
    /// Largest critic weight magnitude after each critic update of this step.
    pub max_abs_critic_weight: f64,
}

pub struct WganOutcome {
    pub generator: Network,
    pub critic: Network,
    pub history: History,
}

/// Latent batch drawn from N(0, 1).
pub fn sample_latent(rng: &mut rng::Rng, batch: usize, z_dim: usize) -> Result<Tensor> {
    Ok(Tensor::new(vec![batch, z_dim], (0..batch * z_dim).map(|_| StandardNormal.sample(rng)).collect())?)
}

/// Patches as an `N x 1 x 32 x 32` tensor mapped from `[0, 1]` to `[-1, 1]`.
pub fn patches_to_signed(patches: &PatchSet) -> Result<Tensor> {
    let t = images_to_tensor(&patches.patches().iter().collect::<Vec<_>>())?;
    Ok(t.map(|v| 2.0 * v - 1.0))
}

fn gather_rows(src: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let row = src.len() / src.shape()[0];
    let mut data = Vec::with_capacity(idx.len() * row);
    for &i in idx {
        data.extend_from_slice(&src.data()[i * row..(i + 1) * row]);
    }
    let mut shape = src.shape().to_vec();
    shape[0] = idx.len();
    Ok(Tensor::new(shape, data)?)
}

/// Freshly initialized `(generator, critic)` exactly as [`train_wgan`]
/// starts from for `seed`.
pub fn init_wgan(gen_cfg: GeneratorConfig, critic_cfg: CriticConfig, seed: u64) -> Result<(Network, Network)> {
    Ok((
        Network::init(build_generator(gen_cfg)?, rng::derive_seed(seed, 0))?,
        Network::init(build_critic(critic_cfg)?, rng::derive_seed(seed, 1))?,
    ))
}

#[derive(Serialize)]
struct WganSnapshot<'a> {
    generator: GeneratorConfig,
    critic: CriticConfig,
    train: &'a TrainConfig,
    patches: usize,
}

/// Alternates `n_critic` critic updates (each followed by weight clipping)
/// with one generator update. Real batches are drawn uniformly with
/// replacement; dropout is active whenever the critic runs.
pub fn train_wgan(
    patches: &PatchSet,
    gen_cfg: GeneratorConfig,
    critic_cfg: CriticConfig,
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
    observer: &mut dyn FnMut(&WganStep),
) -> Result<WganOutcome> {
    cfg.validate()?;
    if patches.is_empty() {
        return Err(Error::Empty("patch set"));
    }
    let (mut generator, mut critic) = init_wgan(gen_cfg, critic_cfg, cfg.seed)?;
    let real = patches_to_signed(patches)?;
    let n = patches.len();
    let mut r = rng::seeded_stream(cfg.seed, 3);
    let mut opt_g = cfg.optimizer.build();
    let mut opt_c = cfg.optimizer.build();
    let steps_per_epoch = cfg.steps_per_epoch.unwrap_or_else(|| n.div_ceil(cfg.batch_size));
    if let Some(dir) = run_dir {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        write_json(&dir.join("config.json"), &WganSnapshot { generator: gen_cfg, critic: critic_cfg, train: cfg, patches: n })?;
    }

    let mut history = History::default();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let (mut critic_sum, mut gen_sum) = (0.0, 0.0);
        for _ in 0..steps_per_epoch {
            let mut critic_loss = 0.0;
            let mut max_w: f64 = 0.0;
            for _ in 0..cfg.n_critic {
                let idx: Vec<usize> = (0..cfg.batch_size).map(|_| r.random_range(0..n)).collect();
                let real_batch = gather_rows(&real, &idx)?;
                let z = sample_latent(&mut r, cfg.batch_size, gen_cfg.z_dim)?;

                let mut g = Graph::new();
                let zv = g.constant(z);
                let fake = generator.forward(&mut g, zv, &mut ForwardCtx { mode: Mode::Train, rng: None, frozen: true })?.output;
                let fake = g.constant(g.value(fake).clone());
                let real_v = g.constant(real_batch);
                let mut ctx = ForwardCtx { mode: Mode::Train, rng: Some(&mut r), frozen: false };
                let d_fake = critic.forward(&mut g, fake, &mut ctx)?.output;
                let d_real = critic.forward(&mut g, real_v, &mut ctx)?.output;
                let loss = critic_loss_node(&mut g, d_fake, d_real)?;
                critic_loss = ensure_finite(g.value(loss).data()[0], "critic loss", step)?;
                let grads = g.backward(loss)?;
                opt_c.step(critic.params_mut(), &grads)?;
                clip_weights(critic.params_mut(), cfg.clip)?;
                max_w = max_w.max(critic.params().max_abs_trainable());
            }

            let z = sample_latent(&mut r, cfg.batch_size, gen_cfg.z_dim)?;
            let mut g = Graph::new();
            let zv = g.constant(z);
            let out = generator.forward(&mut g, zv, &mut ForwardCtx { mode: Mode::Train, rng: None, frozen: false })?;
            let d_fake = critic
                .forward(&mut g, out.output, &mut ForwardCtx { mode: Mode::Train, rng: Some(&mut r), frozen: true })?
                .output;
            let loss = generator_loss_node(&mut g, d_fake)?;
            let generator_loss = ensure_finite(g.value(loss).data()[0], "generator loss", step)?;
            let grads = g.backward(loss)?;
            opt_g.step(generator.params_mut(), &grads)?;
            generator.update_running_stats(&out.batch_stats);

            critic_sum += critic_loss;
            gen_sum += generator_loss;
            step += 1;
            observer(&WganStep { step, epoch, critic_loss, generator_loss, max_abs_critic_weight: max_w });
        }
        history.records.push(EpochRecord {
            epoch,
            train_loss: critic_sum / steps_per_epoch as f64,
            val_loss: gen_sum / steps_per_epoch as f64,
            seconds: started.elapsed().as_secs_f64(),
        });
        if let Some(dir) = run_dir {
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                generator.to_weights().save(&dir.join(format!("epoch_{epoch}.msnw")))?;
                critic.to_weights().save(&dir.join(format!("critic_epoch_{epoch}.msnw")))?;
            }
            export_history(&history, &dir.join("history.csv"))?;
        }
    }
    if let Some(dir) = run_dir {
        generator.to_weights().save(&dir.join("best.msnw"))?;
        critic.to_weights().save(&dir.join("critic.msnw"))?;
    }
    Ok(WganOutcome { generator, critic, history })
}

/// Progress of one U-Net update.
#[derive(Clone, Copy, Debug)]
pub struct UnetStep {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub mse: f64,
}

pub struct UnetOutcome {
    /// Validation loss of the freshly initialized network.
    pub initial_val_loss: f64,
    /// Weights with the lowest validation loss.
    pub best: Network,
    pub best_epoch: usize,
    pub last: Network,
    pub history: History,
}

/// A `(clean, distorted)` training pair.
pub type Pair = (Image, Image);

fn pair_tensors(pairs: &[&Pair]) -> Result<(Tensor, Tensor)> {
    let clean: Vec<&Image> = pairs.iter().map(|p| &p.0).collect();
    let distorted: Vec<&Image> = pairs.iter().map(|p| &p.1).collect();
    Ok((images_to_tensor(&clean)?, images_to_tensor(&distorted)?))
}

/// Mean combined loss of `net` over `pairs` in eval mode, weighting each
/// batch by its size. Never changes the weights.
pub fn evaluate_loss(net: &Network, pairs: &[Pair], phi: &dyn FeatureExtractor, gamma: f64, batch_size: usize) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let mut total = 0.0;
    for chunk in pairs.chunks(batch_size.max(1)) {
        let refs: Vec<&Pair> = chunk.iter().collect();
        let (clean, distorted) = pair_tensors(&refs)?;
        let mut g = Graph::new();
        let x = g.constant(distorted);
        let y = g.constant(clean);
        let y_hat = net.forward(&mut g, x, &mut ForwardCtx::eval())?.output;
        let loss = combined_loss_node(&mut g, phi, y, y_hat, gamma)?.total;
        total += g.value(loss).data()[0] * chunk.len() as f64;
    }
    Ok(total / pairs.len() as f64)
}

#[derive(Serialize)]
struct UnetSnapshot<'a> {
    unet: UnetConfig,
    train: &'a TrainConfig,
    train_pairs: usize,
    val_pairs: usize,
}

/// Minimizes `L_mse + γ L_p` with the configured optimizer. The training
/// pairs are reshuffled from the seed whenever a pass completes; validation
/// runs after every epoch and the best weights are kept.
pub fn train_unet_pairs(
    train: &[Pair],
    val: &[Pair],
    unet_cfg: UnetConfig,
    phi: &dyn FeatureExtractor,
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
    observer: &mut dyn FnMut(&UnetStep),
) -> Result<UnetOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if val.is_empty() {
        return Err(Error::Empty("validation split"));
    }
    let mut net = Network::init(build_unet(unet_cfg)?, rng::derive_seed(cfg.seed, 0))?;
    let mut opt = cfg.optimizer.build();
    let mut r = rng::seeded_stream(cfg.seed, 4);
    let steps_per_epoch = cfg.steps_per_epoch.unwrap_or_else(|| train.len().div_ceil(cfg.batch_size));
    if let Some(dir) = run_dir {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        write_json(
            &dir.join("config.json"),
            &UnetSnapshot { unet: unet_cfg, train: cfg, train_pairs: train.len(), val_pairs: val.len() },
        )?;
    }

    let initial_val_loss = evaluate_loss(&net, val, phi, cfg.gamma, cfg.batch_size)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = train.len();
    let mut history = History::default();
    let mut best: Option<(f64, usize, Network)> = None;
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut loss_sum = 0.0;
        for _ in 0..steps_per_epoch {
            let mut batch = Vec::with_capacity(cfg.batch_size);
            while batch.len() < cfg.batch_size.min(train.len()) {
                if cursor == train.len() {
                    order.shuffle(&mut r);
                    cursor = 0;
                }
                batch.push(&train[order[cursor]]);
                cursor += 1;
            }
            let (clean, distorted) = pair_tensors(&batch)?;
            let mut g = Graph::new();
            let x = g.constant(distorted);
            let y = g.constant(clean);
            let y_hat = net.forward(&mut g, x, &mut ForwardCtx { mode: Mode::Train, rng: None, frozen: false })?.output;
            let parts = combined_loss_node(&mut g, phi, y, y_hat, cfg.gamma)?;
            let loss = ensure_finite(g.value(parts.total).data()[0], "U-Net loss", step)?;
            let mse = g.value(parts.mse).data()[0];
            let grads = g.backward(parts.total)?;
            opt.step(net.params_mut(), &grads)?;
            loss_sum += loss;
            step += 1;
            observer(&UnetStep { step, epoch, loss, mse });
        }
        let val_loss = ensure_finite(evaluate_loss(&net, val, phi, cfg.gamma, cfg.batch_size)?, "validation loss", step)?;
        history.records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / steps_per_epoch as f64,
            val_loss,
            seconds: started.elapsed().as_secs_f64(),
        });
        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, net.clone()));
            if let Some(dir) = run_dir {
                net.to_weights().save(&dir.join("best.msnw"))?;
            }
        }
        if let Some(dir) = run_dir {
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                net.to_weights().save(&dir.join(format!("epoch_{epoch}.msnw")))?;
            }
            export_history(&history, &dir.join("history.csv"))?;
        }
    }
    let (_, best_epoch, best) = best.expect("at least one epoch");
    Ok(UnetOutcome { initial_val_loss, best, best_epoch, last: net, history })
}

/// Loads the train and validation splits of a manifest and trains on them.
pub fn train_unet(
    manifest: &Manifest,
    root: &Path,
    unet_cfg: UnetConfig,
    phi: &dyn FeatureExtractor,
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
    observer: &mut dyn FnMut(&UnetStep),
) -> Result<UnetOutcome> {
    let strip = |v: Vec<(String, Image, Image)>| v.into_iter().map(|(_, c, d)| (c, d)).collect::<Vec<_>>();
    let train = strip(load_split(manifest, root, Split::Train)?);
    let val = strip(load_split(manifest, root, Split::Val)?);
    train_unet_pairs(&train, &val, unet_cfg, phi, cfg, run_dir, observer)
}
