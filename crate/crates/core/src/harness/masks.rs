//! Free-form hole masks: one blob held still or dragged along a seeded path.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Stationary,
    Moving,
}

impl FromStr for MaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stationary" => Ok(Self::Stationary),
            "moving" => Ok(Self::Moving),
            other => Err(Error::Invalid(format!("unknown mask kind {other:?}"))),
        }
    }
}

/// Random-walk brush strokes of disks until `coverage·H·W` pixels are set.
/// Each added disk covers at most a ninth of the target, which keeps the
/// overshoot well inside ±20 %.
fn blob(height: usize, width: usize, coverage: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let target = (coverage * (height * width) as f64).round() as usize;
    let radius = ((target as f64 / std::f64::consts::PI).sqrt() / 3.0).max(1.0);
    let mut hole = vec![false; height * width];
    let mut count = 0;
    let (mut x, mut y) = (rng.gen_range(0.0..width as f64), rng.gen_range(0.0..height as f64));
    let mut heading: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    while count < target.max(1) {
        let r = radius * rng.gen_range(0.6..1.0);
        let (y_lo, y_hi) = (((y - r).floor().max(0.0)) as usize, ((y + r).ceil() as usize).min(height - 1));
        let (x_lo, x_hi) = (((x - r).floor().max(0.0)) as usize, ((x + r).ceil() as usize).min(width - 1));
        for py in y_lo..=y_hi {
            for px in x_lo..=x_hi {
                let i = py * width + px;
                if !hole[i] && (px as f64 - x).powi(2) + (py as f64 - y).powi(2) <= r * r {
                    hole[i] = true;
                    count += 1;
                }
            }
        }
        heading += rng.gen_range(-0.8..0.8);
        x = (x + heading.cos() * r).clamp(0.0, (width - 1) as f64);
        y = (y + heading.sin() * r).clamp(0.0, (height - 1) as f64);
        if x <= 0.0 || y <= 0.0 || x >= (width - 1) as f64 || y >= (height - 1) as f64 {
            heading += std::f64::consts::PI;
        }
    }
    hole
}

/// Masks `[T, 1, H, W]` with 1 marking holes. Moving masks translate the
/// blob with wrap-around so every frame keeps the same coverage.
pub fn gen_masks(kind: MaskKind, frames: usize, height: usize, width: usize, seed: u64, coverage: f64) -> Result<Tensor> {
    if !(coverage > 0.0 && coverage <= 0.9) {
        return Err(Error::Invalid(format!("coverage must lie in (0, 0.9], got {coverage}")));
    }
    if frames == 0 || height == 0 || width == 0 {
        return Err(Error::Invalid("mask sequences need T, H, W ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = blob(height, width, coverage, &mut rng);
    let (vx, vy) = match kind {
        MaskKind::Stationary => (0.0, 0.0),
        MaskKind::Moving => {
            let speed = rng.gen_range(1.0..3.0);
            let dir: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            (speed * dir.cos(), speed * dir.sin())
        }
    };
    let plane = height * width;
    let mut data = vec![0.0; frames * plane];
    for t in 0..frames {
        let dx = (vx * t as f64).round() as i64;
        let dy = (vy * t as f64).round() as i64;
        for y in 0..height {
            let sy = (y as i64 - dy).rem_euclid(height as i64) as usize;
            for x in 0..width {
                let sx = (x as i64 - dx).rem_euclid(width as i64) as usize;
                if base[sy * width + sx] {
                    data[t * plane + y * width + x] = 1.0;
                }
            }
        }
    }
    Tensor::new(&[frames, 1, height, width], data)
}
