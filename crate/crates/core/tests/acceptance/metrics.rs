//! Closed-form metric values.

use snowkit::metrics::{psnr, psnr_from_mse, ssim, uciqe, uiqm};
use snowkit::Image;

use crate::common::noise_image;
use crate::{ensure, Outcome};

fn err(e: snowkit::Error) -> String {
    e.to_string()
}

pub fn run() -> Outcome {
    let p = psnr_from_mse(0.01);
    ensure((p - 20.0).abs() <= 1e-6, || format!("psnr(mse 0.01) = {p}"))?;
    let a = noise_image(48, 40, 3, 1);
    let b = noise_image(48, 40, 3, 2);
    let p_ab = psnr(&a, &b).map_err(err)?;
    let p_ba = psnr(&b, &a).map_err(err)?;
    ensure(p_ab == p_ba && psnr(&a, &a).map_err(err)?.is_infinite(), || "psnr symmetry / identity".into())?;

    let s = ssim(&a, &a).map_err(err)?;
    ensure((s - 1.0).abs() <= 1e-8, || format!("ssim(a, a) = {s}"))?;
    let c1 = 1e-4;
    let expected = (2.0 * 0.5 * 0.25 + c1) / (0.25 + 0.0625 + c1);
    let constant = ssim(&Image::filled(32, 32, 3, 0.5).unwrap(), &Image::filled(32, 32, 3, 0.25).unwrap()).map_err(err)?;
    ensure((constant - 0.8001).abs() <= 1e-3 && (constant - expected).abs() <= 1e-12, || {
        format!("constant-pair ssim = {constant}, analytic {expected}")
    })?;

    let mut worst: f64 = 0.0;
    for level in [0.0, 0.2, 0.5, 0.73, 1.0] {
        let gray = Image::filled(32, 32, 3, level).unwrap();
        worst = worst.max(uiqm(&gray).map_err(err)?.abs()).max(uciqe(&gray).map_err(err)?.abs());
    }
    ensure(worst <= 1e-8, || format!("constant gray scores up to {worst:e}"))?;
    Ok(format!(
        "psnr 20 dB (err {:.0e}), ssim(a,a) = {s}, constant pair {constant:.6}, gray UIQM/UCIQE max |.| {worst:.0e}",
        (p - 20.0).abs()
    ))
}
