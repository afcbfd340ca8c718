//! Image quality metrics on `[0, data_range]` images.

use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_pair(a: &[f32], b: &[f32]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::param(format!(
            "metric inputs differ in size ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

pub fn mse(a: &[f32], b: &[f32]) -> Result<f64> {
    check_pair(a, b)?;
    Ok(a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / a.len() as f64)
}

/// Peak signal-to-noise ratio in dB; `+inf` for identical images.
pub fn psnr(a: &[f32], b: &[f32], data_range: f64) -> Result<f64> {
    psnr_from_mse(mse(a, b)?, data_range)
}

pub fn psnr_from_mse(mse: f64, data_range: f64) -> Result<f64> {
    if !(data_range > 0.0) {
        return Err(Error::param("data_range must be positive"));
    }
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable Gaussian filter over fully-contained windows.
fn filter_valid(img: &[f64], rows: usize, cols: usize, w: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (vr, vc) = (rows - SSIM_WINDOW + 1, cols - SSIM_WINDOW + 1);
    let mut tmp = vec![0.0; rows * vc];
    for r in 0..rows {
        for c in 0..vc {
            tmp[r * vc + c] = (0..SSIM_WINDOW).map(|k| w[k] * img[r * cols + c + k]).sum();
        }
    }
    let mut out = vec![0.0; vr * vc];
    for r in 0..vr {
        for c in 0..vc {
            out[r * vc + c] = (0..SSIM_WINDOW).map(|k| w[k] * tmp[(r + k) * vc + c]).sum();
        }
    }
    out
}

/// Structural similarity with an 11x11 Gaussian window (sigma 1.5),
/// averaged over all windows that fit inside the image.
pub fn ssim(a: &[f32], b: &[f32], rows: usize, cols: usize, data_range: f64) -> Result<f64> {
    check_pair(a, b)?;
    if a.len() != rows * cols {
        return Err(Error::param(format!("{} pixels do not form {rows}x{cols}", a.len())));
    }
    if rows < SSIM_WINDOW || cols < SSIM_WINDOW {
        return Err(Error::param(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {rows}x{cols}"
        )));
    }
    if !(data_range > 0.0) {
        return Err(Error::param("data_range must be positive"));
    }
    let w = gaussian_window();
    let x: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(s, t)| s * t).collect::<Vec<f64>>();
    let mx = filter_valid(&x, rows, cols, &w);
    let my = filter_valid(&y, rows, cols, &w);
    let sxx = filter_valid(&prod(&x, &x), rows, cols, &w);
    let syy = filter_valid(&prod(&y, &y), rows, cols, &w);
    let sxy = filter_valid(&prod(&x, &y), rows, cols, &w);
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}
