//! PSNR and SSIM, plus slow reference evaluations used to cross-check them.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Reported PSNR for identical inputs.
pub const PSNR_SENTINEL: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
const C1: f64 = K1 * K1;
const C2: f64 = K2 * K2;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(crate::error::shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `10·log10(1 / MSE)` for data in [0, 1]; [`PSNR_SENTINEL`] when MSE is 0
/// (and never above it).
pub fn psnr(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    same_shape("psnr", pred, gt)?;
    let n = pred.numel().max(1) as f64;
    let mse = pred.data().iter().zip(gt.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_SENTINEL
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_SENTINEL)
    }
}

/// Normalised 1-D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Luminance planes `[T][H·W]` of `[C, H, W]` or `[T, C, H, W]` data with
/// C = 1 (used as is) or C = 3 (BT.601 weights).
fn luminance(x: &Tensor) -> Result<(Vec<Vec<f64>>, usize, usize)> {
    let s = x.shape();
    let (t, c, h, w) = match *s {
        [c, h, w] => (1, c, h, w),
        [t, c, h, w] => (t, c, h, w),
        _ => return Err(crate::error::shape_err("ssim", format!("expected [C,H,W] or [T,C,H,W], got {s:?}"))),
    };
    let plane = h * w;
    let d = x.data();
    let planes = (0..t)
        .map(|f| {
            let base = f * c * plane;
            match c {
                1 => Ok(d[base..base + plane].to_vec()),
                3 => Ok((0..plane)
                    .map(|i| 0.299 * d[base + i] + 0.587 * d[base + plane + i] + 0.114 * d[base + 2 * plane + i])
                    .collect()),
                _ => Err(crate::error::shape_err("ssim", format!("{c} channels; expected 1 or 3"))),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((planes, h, w))
}

fn ssim_shapes(pred: &Tensor, gt: &Tensor) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, usize, usize)> {
    same_shape("ssim", pred, gt)?;
    let (a, h, w) = luminance(pred)?;
    let (b, _, _) = luminance(gt)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Invalid(format!("SSIM needs images of at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {h}×{w}")));
    }
    Ok((a, b, h, w))
}

fn ssim_term(mx: f64, my: f64, sxx: f64, syy: f64, sxy: f64) -> f64 {
    ((2.0 * mx * my + C1) * (2.0 * sxy + C2)) / ((mx * mx + my * my + C1) * (sxx + syy + C2))
}

/// Separable Gaussian filter, valid region only.
fn filter_valid(img: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = taps.iter().enumerate().map(|(i, t)| t * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * wo + x]).sum();
        }
    }
    out
}

/// Mean local SSIM of the luminance (11×11 Gaussian window, σ = 1.5,
/// dynamic range 1, valid windows only), averaged over frames.
pub fn ssim(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let (a, b, h, w) = ssim_shapes(pred, gt)?;
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let mut total = 0.0;
    for (x, y) in a.iter().zip(&b) {
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
        let [mx, my, ex2, ey2, exy] = [x, y, &xx, &yy, &xy].map(|p| filter_valid(p, h, w, &taps));
        let n = mx.len();
        let s: f64 = (0..n)
            .map(|i| {
                ssim_term(
                    mx[i],
                    my[i],
                    ex2[i] - mx[i] * mx[i],
                    ey2[i] - my[i] * my[i],
                    exy[i] - mx[i] * my[i],
                )
            })
            .sum();
        total += s / n as f64;
    }
    Ok(total / a.len() as f64)
}

/// Direct formula evaluations, deliberately free of shared fast-path code.
pub mod reference {
    use super::*;

    pub fn psnr(pred: &Tensor, gt: &Tensor) -> Result<f64> {
        same_shape("psnr", pred, gt)?;
        let mut acc = 0.0;
        for i in 0..pred.numel() {
            let d = pred.data()[i] - gt.data()[i];
            acc += d * d;
        }
        let mse = acc / pred.numel() as f64;
        Ok(if mse == 0.0 { PSNR_SENTINEL } else { -10.0 * mse.log10() })
    }

    /// Explicit 2-D windows: weighted means, variances and covariance per
    /// window position, computed around the window mean.
    pub fn ssim(pred: &Tensor, gt: &Tensor) -> Result<f64> {
        let (a, b, h, w) = ssim_shapes(pred, gt)?;
        let k = SSIM_WINDOW;
        let c = (k - 1) as f64 / 2.0;
        let mut win = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                let r2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
                win[i * k + j] = (-r2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            }
        }
        let norm: f64 = win.iter().sum();
        win.iter_mut().for_each(|v| *v /= norm);
        let mut frames_sum = 0.0;
        for (x, y) in a.iter().zip(&b) {
            let mut acc = 0.0;
            let mut count = 0usize;
            for oy in 0..=h - k {
                for ox in 0..=w - k {
                    let at = |img: &Vec<f64>, i: usize, j: usize| img[(oy + i) * w + ox + j];
                    let (mut mx, mut my) = (0.0, 0.0);
                    for i in 0..k {
                        for j in 0..k {
                            mx += win[i * k + j] * at(x, i, j);
                            my += win[i * k + j] * at(y, i, j);
                        }
                    }
                    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                    for i in 0..k {
                        for j in 0..k {
                            let (dx, dy) = (at(x, i, j) - mx, at(y, i, j) - my);
                            vx += win[i * k + j] * dx * dx;
                            vy += win[i * k + j] * dy * dy;
                            cxy += win[i * k + j] * dx * dy;
                        }
                    }
                    acc += ((2.0 * mx * my + C1) * (2.0 * cxy + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2));
                    count += 1;
                }
            }
            frames_sum += acc / count as f64;
        }
        Ok(frames_sum / a.len() as f64)
    }

    /// SSIM of two constant images `a` and `b`: only the luminance term survives.
    pub fn ssim_constants(a: f64, b: f64) -> f64 {
        (2.0 * a * b + C1) / (a * a + b * b + C1)
    }
}
