//! Image metrics over `[-1, 1]` tensors: MSE, PSNR, SSIM.
//!
//! PSNR uses peak = 2.0 (the value range width). Identical images give
//! `+inf`; anything writing PSNR into a report caps it at
//! [`PSNR_SENTINEL_DB`] so CSV consumers never see `inf`.
//!
//! SSIM follows the windowed form: 11x11 Gaussian window with sigma 1.5,
//! K1 = 0.01, K2 = 0.03, dynamic range L = 2.0, valid windows only (no
//! padding), averaged over window positions and channels.

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Value range width for data in [-1, 1].
pub const PEAK: f64 = 2.0;

/// Cap used when reporting PSNR of (near-)identical images.
pub const PSNR_SENTINEL_DB: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

#[derive(Clone, Copy, Debug)]
pub struct MetricReport {
    pub mse: f64,
    pub psnr_db: f64,
    pub ssim: f64,
}

fn check_pair(a: &Tensor, b: &Tensor) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch(format!(
            "metric inputs {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Mean squared difference.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_pair(a, b)?;
    Ok(a.sub(b).sqnorm() / a.numel() as f64)
}

/// `10*log10(peak^2 / mse)`; `+inf` for identical inputs.
pub fn psnr_db(a: &Tensor, b: &Tensor) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (PEAK * PEAK / m).log10())
}

/// PSNR with the +inf case collapsed to the sentinel, for reports.
pub fn psnr_db_capped(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(psnr_db(a, b)?.min(PSNR_SENTINEL_DB))
}

/// Normalized 1D Gaussian taps for the SSIM window.
fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in g.iter_mut().enumerate() {
        *v = (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut g {
        *v /= sum;
    }
    g
}

/// Separable valid-window Gaussian filter of one `[h, w]` plane.
/// Returns an `(h-10) x (w-10)` buffer of window means.
fn filter_plane(plane: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let half = SSIM_WINDOW / 2;
    let wo = w - 2 * half;
    let ho = h - 2 * half;
    // horizontal pass: rows stay full height, columns become valid-only
    let mut hpass = vec![0.0; h * wo];
    for y in 0..h {
        for xo in 0..wo {
            let mut acc = 0.0;
            for (k, &g) in taps.iter().enumerate() {
                acc += g * plane[y * w + xo + k];
            }
            hpass[y * wo + xo] = acc;
        }
    }
    let mut out = vec![0.0; ho * wo];
    for yo in 0..ho {
        for xo in 0..wo {
            let mut acc = 0.0;
            for (k, &g) in taps.iter().enumerate() {
                acc += g * hpass[(yo + k) * wo + xo];
            }
            out[yo * wo + xo] = acc;
        }
    }
    out
}

/// Mean SSIM over valid window positions and channels of `[c, h, w]` images.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_pair(a, b)?;
    let shape = a.shape();
    if shape.len() != 3 {
        return Err(Error::InvalidArgument(format!(
            "ssim expects [c, h, w], got {:?}",
            shape
        )));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {h}x{w}"
        )));
    }
    let taps = gaussian_taps();
    let c1 = (SSIM_K1 * PEAK).powi(2);
    let c2 = (SSIM_K2 * PEAK).powi(2);

    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let pa = &a.data()[ch * h * w..(ch + 1) * h * w];
        let pb = &b.data()[ch * h * w..(ch + 1) * h * w];
        let sq_a: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let sq_b: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = pa.iter().zip(pb).map(|(x, y)| x * y).collect();

        let mu_a = filter_plane(pa, h, w, &taps);
        let mu_b = filter_plane(pb, h, w, &taps);
        let e_a2 = filter_plane(&sq_a, h, w, &taps);
        let e_b2 = filter_plane(&sq_b, h, w, &taps);
        let e_ab = filter_plane(&ab, h, w, &taps);

        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_a2[i] - ma * ma;
            let vb = e_b2[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// All three metrics in one report (PSNR capped).
pub fn report(a: &Tensor, b: &Tensor) -> Result<MetricReport> {
    Ok(MetricReport {
        mse: mse(a, b)?,
        psnr_db: psnr_db_capped(a, b)?,
        ssim: ssim(a, b)?,
    })
}
