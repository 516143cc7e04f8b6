//! Full-reference (MSE, PSNR, SSIM) and no-reference underwater (UIQM, UCIQE)
//! quality measures, plus batch reports.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, Error, Result};
use crate::imagecore::{Image, LUMA};

fn check_pair(a: &Image, b: &Image) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::ShapeMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.width(),
            a.height(),
            a.channels(),
            b.width(),
            b.height(),
            b.channels()
        )))
    }
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_pair(a, b)?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.data().len() as f64)
}

/// PSNR for a given MSE with peak 1; infinite when `mse == 0`.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian filter keeping only fully covered positions.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn channel_plane(img: &Image, c: usize) -> Vec<f64> {
    img.data().iter().skip(c).step_by(img.channels()).copied().collect()
}

/// Single-scale SSIM: 11x11 Gaussian window (σ = 1.5), K1 = 0.01, K2 = 0.03,
/// dynamic range 1, mean over all window positions, averaged over channels.
///
/// For two constant images all variances vanish, the contrast-structure term
/// is `C2 / C2 = 1`, and SSIM reduces to the luminance term: constants 0.5
/// and 0.25 give `(2 * 0.5 * 0.25 + C1) / (0.25 + 0.0625 + C1) ≈ 0.8001`.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_pair(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h.min(w) < SSIM_WINDOW {
        return Err(invalid(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}")));
    }
    let k = gaussian_kernel();
    let mut total = 0.0;
    for c in 0..a.channels() {
        let pa = channel_plane(a, c);
        let pb = channel_plane(b, c);
        let sq = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
        let mu_a = filter_valid(&pa, h, w, &k);
        let mu_b = filter_valid(&pb, h, w, &k);
        let e_aa = filter_valid(&sq(&pa, &pa), h, w, &k);
        let e_bb = filter_valid(&sq(&pb, &pb), h, w, &k);
        let e_ab = filter_valid(&sq(&pa, &pb), h, w, &k);
        let mut sum = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let var_a = e_aa[i] - ma * ma;
            let var_b = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            sum += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (var_a + var_b + SSIM_C2));
        }
        total += sum / mu_a.len() as f64;
    }
    Ok(total / a.channels() as f64)
}

const UIQM_WEIGHTS: [f64; 3] = [0.0282, 0.2953, 3.5753];
const UIQM_BLOCK: usize = 8;
const TRIM_ALPHA: f64 = 0.1;

fn require_rgb(img: &Image, metric: &str) -> Result<()> {
    if img.channels() == 3 {
        Ok(())
    } else {
        Err(invalid(format!("{metric} needs a 3-channel image")))
    }
}

/// Mean of the sorted samples after dropping `ceil(αK)` from the bottom and
/// `floor(αK)` from the top.
fn trimmed_mean(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len();
    let lo = (TRIM_ALPHA * k as f64).ceil() as usize;
    let hi = (TRIM_ALPHA * k as f64).floor() as usize;
    let kept = &v[lo..k - hi];
    kept.iter().sum::<f64>() / kept.len() as f64
}

fn spread_about(v: &[f64], mu: f64) -> f64 {
    v.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / v.len() as f64
}

/// Colourfulness on the 0-255 scale from α-trimmed opponent-channel statistics.
pub fn uicm(img: &Image) -> Result<f64> {
    require_rgb(img, "UICM")?;
    let (mut rg, mut yb) = (Vec::new(), Vec::new());
    for p in img.data().chunks_exact(3) {
        let (r, g, b) = (p[0] * 255.0, p[1] * 255.0, p[2] * 255.0);
        rg.push(r - g);
        yb.push((r + g) / 2.0 - b);
    }
    let mu_rg = trimmed_mean(rg.clone());
    let mu_yb = trimmed_mean(yb.clone());
    let var = spread_about(&rg, mu_rg) + spread_about(&yb, mu_yb);
    Ok(-0.0268 * (mu_rg * mu_rg + mu_yb * mu_yb).sqrt() + 0.1586 * var.sqrt())
}

/// Sobel gradient magnitude with replicated borders.
fn sobel_magnitude(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |y: isize, x: isize| plane[y.clamp(0, h as isize - 1) as usize * w + x.clamp(0, w as isize - 1) as usize];
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1)
                - at(y - 1, x - 1)
                - 2.0 * at(y, x - 1)
                - at(y + 1, x - 1);
            let gy = at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1)
                - at(y - 1, x - 1)
                - 2.0 * at(y - 1, x)
                - at(y - 1, x + 1);
            out[y as usize * w + x as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

fn block_grid(img: &Image) -> Result<(usize, usize)> {
    let (k1, k2) = (img.height() / UIQM_BLOCK, img.width() / UIQM_BLOCK);
    if k1 == 0 || k2 == 0 {
        return Err(invalid(format!("UIQM needs at least {UIQM_BLOCK}x{UIQM_BLOCK} pixels")));
    }
    Ok((k1, k2))
}

/// Extremes of block `(by, bx)` over the listed planes.
fn block_extremes(planes: &[&[f64]], w: usize, by: usize, bx: usize) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for plane in planes {
        for y in by * UIQM_BLOCK..(by + 1) * UIQM_BLOCK {
            for &v in &plane[y * w + bx * UIQM_BLOCK..y * w + (bx + 1) * UIQM_BLOCK] {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
    }
    (lo, hi)
}

/// `2/(k1 k2) Σ ln(max/min)` over 8x8 blocks; blocks with a zero minimum
/// contribute nothing.
fn eme(plane: &[f64], h: usize, w: usize) -> f64 {
    let (k1, k2) = (h / UIQM_BLOCK, w / UIQM_BLOCK);
    let mut sum = 0.0;
    for by in 0..k1 {
        for bx in 0..k2 {
            let (lo, hi) = block_extremes(&[plane], w, by, bx);
            if lo > 0.0 {
                sum += (hi / lo).ln();
            }
        }
    }
    2.0 * sum / (k1 * k2) as f64
}

/// Sharpness: luma-weighted EME of each channel times its Sobel magnitude.
pub fn uism(img: &Image) -> Result<f64> {
    require_rgb(img, "UISM")?;
    block_grid(img)?;
    let (h, w) = (img.height(), img.width());
    let mut total = 0.0;
    for (c, weight) in LUMA.iter().enumerate() {
        let plane: Vec<f64> = channel_plane(img, c).iter().map(|v| v * 255.0).collect();
        let edges: Vec<f64> = sobel_magnitude(&plane, h, w).iter().zip(&plane).map(|(e, v)| e * v).collect();
        total += weight * eme(&edges, h, w);
    }
    Ok(total)
}

/// Contrast: `-(1/(k1 k2)) Σ t ln t` with `t = (max - min)/(max + min)` over
/// 8x8 blocks spanning all channels.
pub fn uiconm(img: &Image) -> Result<f64> {
    require_rgb(img, "UIConM")?;
    let (k1, k2) = block_grid(img)?;
    let planes: Vec<Vec<f64>> = (0..3).map(|c| channel_plane(img, c)).collect();
    let refs: Vec<&[f64]> = planes.iter().map(Vec::as_slice).collect();
    let mut sum = 0.0;
    for by in 0..k1 {
        for bx in 0..k2 {
            let (lo, hi) = block_extremes(&refs, img.width(), by, bx);
            let (top, bottom) = (hi - lo, hi + lo);
            if top > 0.0 && bottom > 0.0 {
                let t = top / bottom;
                sum += t * t.ln();
            }
        }
    }
    Ok(-sum / (k1 * k2) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UiqmParts {
    pub uicm: f64,
    pub uism: f64,
    pub uiconm: f64,
}

impl UiqmParts {
    pub fn combined(&self) -> f64 {
        UIQM_WEIGHTS[0] * self.uicm + UIQM_WEIGHTS[1] * self.uism + UIQM_WEIGHTS[2] * self.uiconm
    }
}

pub fn uiqm_parts(img: &Image) -> Result<UiqmParts> {
    Ok(UiqmParts {
        uicm: uicm(img)?,
        uism: uism(img)?,
        uiconm: uiconm(img)?,
    })
}

pub fn uiqm(img: &Image) -> Result<f64> {
    Ok(uiqm_parts(img)?.combined())
}

const UCIQE_WEIGHTS: [f64; 3] = [0.4680, 0.2745, 0.2576];

const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412453, 0.357580, 0.180423],
    [0.212671, 0.715160, 0.072169],
    [0.019334, 0.119193, 0.950227],
];

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    if t > 0.008856 {
        t.cbrt()
    } else {
        7.787 * t + 16.0 / 116.0
    }
}

/// CIELab of an sRGB pixel. The reference white is the image of RGB white
/// under the conversion matrix, so neutral colours map to `a* = b* = 0`.
pub fn srgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(srgb_to_linear);
    let xyz = RGB_TO_XYZ.map(|row| row[0] * lin[0] + row[1] * lin[1] + row[2] * lin[2]);
    let white = RGB_TO_XYZ.map(|row| row[0] + row[1] + row[2]);
    let [fx, fy, fz] = [0, 1, 2].map(|i| lab_f(xyz[i] / white[i]));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UciqeParts {
    pub chroma_std: f64,
    pub luminance_contrast: f64,
    pub mean_saturation: f64,
}

impl UciqeParts {
    pub fn combined(&self) -> f64 {
        UCIQE_WEIGHTS[0] * self.chroma_std + UCIQE_WEIGHTS[1] * self.luminance_contrast + UCIQE_WEIGHTS[2] * self.mean_saturation
    }
}

/// Components on a unit scale: `L*/100` and `chroma/100`; saturation is
/// `chroma / L` (0 where `L = 0`); contrast is the spread between the 1st
/// and 99th percentile of `L` taken at sorted indices `floor(0.01 n)` and
/// `floor(0.99 n)`.
pub fn uciqe_parts(img: &Image) -> Result<UciqeParts> {
    require_rgb(img, "UCIQE")?;
    let n = img.data().len() / 3;
    let mut lum = Vec::with_capacity(n);
    let mut chroma = Vec::with_capacity(n);
    let mut sat_sum = 0.0;
    for p in img.data().chunks_exact(3) {
        let [l, a, b] = srgb_to_lab([p[0], p[1], p[2]]);
        let (l, c) = (l / 100.0, (a * a + b * b).sqrt() / 100.0);
        if l > 0.0 {
            sat_sum += c / l;
        }
        lum.push(l);
        chroma.push(c);
    }
    let mean_c = chroma.iter().sum::<f64>() / n as f64;
    let chroma_std = spread_about(&chroma, mean_c).sqrt();
    lum.sort_by(f64::total_cmp);
    let idx = |q: f64| ((q * n as f64).floor() as usize).min(n - 1);
    Ok(UciqeParts {
        chroma_std,
        luminance_contrast: lum[idx(0.99)] - lum[idx(0.01)],
        mean_saturation: sat_sum / n as f64,
    })
}

pub fn uciqe(img: &Image) -> Result<f64> {
    Ok(uciqe_parts(img)?.combined())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub id: String,
    pub mse: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    /// No-reference scores of the candidate; absent for grayscale images.
    pub uiqm: Option<f64>,
    pub uciqe: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub label: String,
    pub rows: Vec<MetricsRow>,
    /// Means over rows; infinite PSNR rows are left out of the PSNR mean.
    pub mean: MetricsRow,
    /// Ids whose PSNR is infinite.
    pub infinite_psnr: Vec<String>,
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

pub const MEAN_ID: &str = "MEAN";

impl MetricsReport {
    pub fn from_rows(label: impl Into<String>, rows: Vec<MetricsRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty("evaluation set"));
        }
        let infinite_psnr = rows.iter().filter(|r| r.psnr_db.is_infinite()).map(|r| r.id.clone()).collect();
        let mean = MetricsRow {
            id: MEAN_ID.to_string(),
            mse: mean_of(rows.iter().map(|r| r.mse)).expect("non-empty"),
            psnr_db: mean_of(rows.iter().map(|r| r.psnr_db).filter(|p| p.is_finite())).unwrap_or(f64::INFINITY),
            ssim: mean_of(rows.iter().map(|r| r.ssim)).expect("non-empty"),
            uiqm: mean_of(rows.iter().filter_map(|r| r.uiqm)),
            uciqe: mean_of(rows.iter().filter_map(|r| r.uciqe)),
        };
        Ok(Self {
            label: label.into(),
            rows,
            mean,
            infinite_psnr,
        })
    }

    pub const CSV_HEADER: &'static str = "id,mse,psnr_db,ssim,uiqm,uciqe";

    /// f64 fields use Rust's shortest round-trip formatting, so parsing the
    /// CSV back reproduces every value exactly.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in self.rows.iter().chain(std::iter::once(&self.mean)) {
            let _ = writeln!(out, "{},{},{},{},{},{}", r.id, r.mse, r.psnr_db, r.ssim, opt(r.uiqm), opt(r.uciqe));
        }
        out
    }

    pub fn from_csv(label: impl Into<String>, text: &str) -> Result<Self> {
        let bad = |detail: String| Error::Format { what: "metrics CSV", detail };
        let mut lines = text.lines();
        if lines.next() != Some(Self::CSV_HEADER) {
            return Err(bad("missing header".into()));
        }
        let mut rows = Vec::new();
        for (no, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad(format!("line {} has {} fields", no + 2, f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("line {}: {s:?}: {e}", no + 2)));
            let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
            rows.push(MetricsRow {
                id: f[0].to_string(),
                mse: num(f[1])?,
                psnr_db: num(f[2])?,
                ssim: num(f[3])?,
                uiqm: opt(f[4])?,
                uciqe: opt(f[5])?,
            });
        }
        match rows.pop() {
            Some(last) if last.id == MEAN_ID => {}
            _ => return Err(bad(format!("last row is not {MEAN_ID}"))),
        }
        Self::from_rows(label, rows)
    }

    /// JSON mirror of the CSV; infinite PSNR is written as the string "inf".
    pub fn to_json(&self) -> serde_json::Value {
        let row = |r: &MetricsRow| {
            serde_json::json!({
                "id": r.id,
                "mse": r.mse,
                "psnr_db": if r.psnr_db.is_finite() { serde_json::json!(r.psnr_db) } else { serde_json::json!("inf") },
                "ssim": r.ssim,
                "uiqm": r.uiqm,
                "uciqe": r.uciqe,
            })
        };
        serde_json::json!({
            "label": self.label,
            "rows": self.rows.iter().map(row).collect::<Vec<_>>(),
            "mean": row(&self.mean),
            "infinite_psnr": self.infinite_psnr,
        })
    }

    pub fn write(&self, csv_path: &Path) -> Result<()> {
        std::fs::write(csv_path, self.to_csv()).map_err(io_err(csv_path))?;
        let json_path = csv_path.with_extension("json");
        let text = serde_json::to_string_pretty(&self.to_json()).expect("report serializes");
        std::fs::write(&json_path, text).map_err(io_err(json_path))
    }
}

pub fn evaluate_pair(id: &str, reference: &Image, candidate: &Image) -> Result<MetricsRow> {
    let m = mse(reference, candidate)?;
    let rgb = candidate.channels() == 3;
    Ok(MetricsRow {
        id: id.to_string(),
        mse: m,
        psnr_db: psnr_from_mse(m),
        ssim: ssim(reference, candidate)?,
        uiqm: if rgb { Some(uiqm(candidate)?) } else { None },
        uciqe: if rgb { Some(uciqe(candidate)?) } else { None },
    })
}

/// Scores `(id, reference, candidate)` triples in parallel; rows keep input order.
pub fn evaluate_pairs(pairs: &[(String, Image, Image)], label: &str) -> Result<MetricsReport> {
    let rows = pairs
        .par_iter()
        .map(|(id, r, c)| evaluate_pair(id, r, c))
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_rows(label, rows)
}
