//! U-Net overfit on a handful of pairs and the baseline ordering.

use snowkit::metrics::{psnr, ssim};
use snowkit::models::{FeatureNet, Network, UnetConfig};
use snowkit::restore::{median_filter, unet_denoise};
use snowkit::train::{train_unet_pairs, Pair, TrainConfig};

use crate::common::synthetic_pairs;
use crate::{ensure, Outcome};

const PAIRS: usize = 8;
const SIDE: usize = 64;
const STEPS: usize = 300;
const BATCH: usize = 4;
const TEST_PAIRS: usize = 60;
const TEST_SIDE: usize = 96;

/// The overfit network, reused by the ordering criterion.
#[derive(Default)]
pub struct Shared {
    overfit: Option<(Network, Vec<Pair>)>,
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn mean_scores(pairs: &[Pair], restore: impl Fn(&snowkit::Image) -> snowkit::Result<snowkit::Image>) -> Result<(f64, f64), String> {
    let mut p = Vec::new();
    let mut s = Vec::new();
    for (clean, distorted) in pairs {
        let out = restore(distorted).map_err(err)?;
        p.push(psnr(clean, &out).map_err(err)?);
        s.push(ssim(clean, &out).map_err(err)?);
    }
    Ok((mean(p.into_iter()), mean(s.into_iter())))
}

pub fn overfit(shared: &mut Shared) -> Outcome {
    let pairs = synthetic_pairs(PAIRS, SIDE, 2024);
    let phi = FeatureNet::random(3, 1).map_err(err)?;
    let cfg = TrainConfig { epochs: 1, batch_size: BATCH, steps_per_epoch: Some(STEPS), gamma: 1.0, ..TrainConfig::unet() };
    let out = train_unet_pairs(&pairs, &pairs, UnetConfig::default(), &phi, &cfg, None, &mut |_| {}).map_err(err)?;
    let initial = out.initial_val_loss;
    let last = out.history.records.last().map(|r| r.val_loss).ok_or("no history")?;
    let ratio = last / initial;
    ensure(ratio <= 0.1, || format!("combined loss {initial:.4} -> {last:.4} (ratio {ratio:.3})"))?;

    let (distorted_psnr, _) = mean_scores(&pairs, |d| Ok(d.clone()))?;
    let (unet_psnr, _) = mean_scores(&pairs, |d| unet_denoise(&out.last, d))?;
    let gain = unet_psnr - distorted_psnr;
    ensure(gain >= 3.0, || format!("PSNR {distorted_psnr:.2} -> {unet_psnr:.2} dB"))?;
    shared.overfit = Some((out.last, pairs));
    Ok(format!(
        "{PAIRS} pairs {SIDE}x{SIDE}, {STEPS} Adam steps: loss {initial:.4} -> {last:.5} (x{ratio:.4}), \
         PSNR {distorted_psnr:.2} -> {unet_psnr:.2} dB (+{gain:.2})"
    ))
}

pub fn ordering(shared: &mut Shared) -> Outcome {
    let test = synthetic_pairs(TEST_PAIRS, TEST_SIDE, 99);
    let (dp, ds) = mean_scores(&test, |d| Ok(d.clone()))?;
    let (mp, ms) = mean_scores(&test, |d| median_filter(d, 3))?;
    ensure(mp > dp && ms > ds, || format!("median3 {mp:.2} dB / {ms:.3} vs distorted {dp:.2} dB / {ds:.3}"))?;

    if shared.overfit.is_none() {
        overfit(shared)?;
    }
    let (net, pairs) = shared.overfit.as_ref().expect("trained above");
    let (tmp, tms) = mean_scores(pairs, |d| median_filter(d, 3))?;
    let (up, us) = mean_scores(pairs, |d| unet_denoise(net, d))?;
    ensure(up > tmp && us > tms, || format!("U-Net {up:.2} dB / {us:.3} vs median3 {tmp:.2} dB / {tms:.3}"))?;
    Ok(format!(
        "{TEST_PAIRS} test pairs: distorted {dp:.2} dB / {ds:.3} < median3 {mp:.2} dB / {ms:.3}; \
         training pairs: median3 {tmp:.2} dB / {tms:.3} < U-Net {up:.2} dB / {us:.3}"
    ))
}
