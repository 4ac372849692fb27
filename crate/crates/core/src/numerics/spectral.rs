//! Spectral normalization by power iteration.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Matrices whose estimated spectral norm falls below this are left untouched.
pub const SPECTRAL_EPS: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct PowerEstimate {
    pub sigma: f64,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

fn normalize(x: &mut [f64]) -> f64 {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        x.iter_mut().for_each(|v| *v /= n);
    }
    n
}

/// Largest singular value of the row-major `rows × cols` matrix `w`.
///
/// Starts from `u0` when given (warm start across training steps), otherwise
/// from a fixed pseudo-random unit vector.
pub fn power_iteration(w: &[f64], rows: usize, cols: usize, iters: usize, u0: Option<&[f64]>) -> PowerEstimate {
    let mut u: Vec<f64> = match u0 {
        Some(u0) if u0.len() == rows => u0.to_vec(),
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_5eed);
            (0..rows).map(|_| rng.gen_range(-1.0..1.0)).collect()
        }
    };
    normalize(&mut u);
    let mut v = vec![0.0; cols];
    for _ in 0..iters.max(1) {
        v.iter_mut().for_each(|x| *x = 0.0);
        for r in 0..rows {
            let ur = u[r];
            for (vc, wv) in v.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
                *vc += wv * ur;
            }
        }
        normalize(&mut v);
        for r in 0..rows {
            u[r] = w[r * cols..(r + 1) * cols].iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        normalize(&mut u);
    }
    let sigma = (0..rows)
        .map(|r| u[r] * w[r * cols..(r + 1) * cols].iter().zip(&v).map(|(a, b)| a * b).sum::<f64>())
        .sum::<f64>()
        .abs();
    PowerEstimate { sigma, u, v }
}

#[derive(Clone, Debug)]
pub struct SpectralResult {
    pub weight: Tensor,
    pub sigma: f64,
    /// Set when the matrix was (numerically) zero and returned unchanged.
    pub warning: Option<String>,
}

/// Divide `weight` (viewed as `shape[0] × rest`) by its estimated largest singular value.
pub fn spectral_normalize(weight: &Tensor, iters: usize) -> Result<SpectralResult> {
    if weight.rank() == 0 {
        return Err(Error::Invalid("spectral_normalize needs at least a 1-D weight".into()));
    }
    if iters == 0 {
        return Err(Error::Invalid("spectral_normalize needs iters >= 1".into()));
    }
    let rows = weight.shape()[0];
    let cols = weight.numel() / rows.max(1);
    let est = power_iteration(weight.data(), rows, cols, iters, None);
    if est.sigma < SPECTRAL_EPS {
        let msg = format!("near-zero matrix (sigma = {:.3e}) returned unchanged", est.sigma);
        log::warn!("spectral_normalize: {msg}");
        return Ok(SpectralResult {
            weight: weight.clone(),
            sigma: est.sigma,
            warning: Some(msg),
        });
    }
    Ok(SpectralResult {
        weight: weight.map(|v| v / est.sigma),
        sigma: est.sigma,
        warning: None,
    })
}
