//! Full-reference image quality metrics and vector cosine similarity.

use serde::{Deserialize, Serialize};

use super::ImageRGB;
use crate::error::{Error, Result};

/// Mean squared error floor; caps PSNR at 100 dB for identical images.
pub const MSE_FLOOR: f64 = 1e-10;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

const COSINE_DENOM_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
}

impl MetricReport {
    pub fn measure(pred: &ImageRGB, truth: &ImageRGB) -> Result<Self> {
        Ok(Self { psnr_db: psnr(pred, truth)?, ssim: ssim(pred, truth)? })
    }
}

pub fn mse(a: &ImageRGB, b: &ImageRGB) -> Result<f64> {
    a.same_dims(b)?;
    let sum: f64 = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.as_slice().len() as f64)
}

/// Peak signal-to-noise ratio in dB with a peak value of 1.
pub fn psnr(a: &ImageRGB, b: &ImageRGB) -> Result<f64> {
    Ok(10.0 * (1.0 / mse(a, b)?.max(MSE_FLOOR)).log10())
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, w) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *w = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= total);
    k
}

/// Separable "valid" filtering of a `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let src = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = k.iter().zip(&src[x..x + SSIM_WINDOW]).map(|(a, b)| a * b).sum();
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

/// Mean structural similarity: 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
/// K2 = 0.03, dynamic range 1, evaluated over the window-valid region of
/// each channel and averaged across channels.
pub fn ssim(a: &ImageRGB, b: &ImageRGB) -> Result<f64> {
    a.same_dims(b)?;
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Dimension(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let k = gaussian_kernel();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mut total = 0.0;
    for ch in 0..3 {
        let x: Vec<f64> = a.as_slice().iter().skip(ch).step_by(3).copied().collect();
        let y: Vec<f64> = b.as_slice().iter().skip(ch).step_by(3).copied().collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mx = filter_valid(&x, h, w, &k);
        let my = filter_valid(&y, h, w, &k);
        let sxx = filter_valid(&xx, h, w, &k);
        let syy = filter_valid(&yy, h, w, &k);
        let sxy = filter_valid(&xy, h, w, &k);
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * cov + c2))
                / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / mx.len() as f64;
    }
    Ok((total / 3.0).clamp(-1.0, 1.0))
}

fn check_lengths(u: &[f64], v: &[f64]) -> Result<()> {
    if u.len() != v.len() || u.is_empty() {
        return Err(Error::Dimension(format!(
            "cosine similarity needs equal non-empty lengths, got {} and {}",
            u.len(),
            v.len()
        )));
    }
    Ok(())
}

/// `u . v / (|u| |v|)` with the denominator floored at 1e-8, clamped to `[-1, 1]`.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    Ok(cosine_similarity_with_grad(u, v)?.0)
}

/// Cosine similarity together with its gradients with respect to `u` and `v`.
pub fn cosine_similarity_with_grad(u: &[f64], v: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    check_lengths(u, v)?;
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu2: f64 = u.iter().map(|a| a * a).sum();
    let nv2: f64 = v.iter().map(|b| b * b).sum();
    let (nu, nv) = (nu2.sqrt(), nv2.sqrt());
    let raw = nu * nv;
    if raw < COSINE_DENOM_FLOOR {
        let cos = (dot / COSINE_DENOM_FLOOR).clamp(-1.0, 1.0);
        let du = v.iter().map(|b| b / COSINE_DENOM_FLOOR).collect();
        let dv = u.iter().map(|a| a / COSINE_DENOM_FLOOR).collect();
        return Ok((cos, du, dv));
    }
    let cos = dot / raw;
    let du = u.iter().zip(v).map(|(a, b)| b / raw - cos * a / nu2).collect();
    let dv = u.iter().zip(v).map(|(a, b)| a / raw - cos * b / nv2).collect();
    Ok((cos.clamp(-1.0, 1.0), du, dv))
}
