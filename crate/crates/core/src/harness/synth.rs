//! Synthetic clips standing in for real footage: smooth value-noise texture
//! plus a foreground disk, moved according to a motion type.
//!
//! * `A` — nothing moves.
//! * `B` — the whole scene pans at a constant velocity (px/frame).
//! * `C` — the pan velocity oscillates and the disk follows its own orbit.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MotionType {
    A,
    B,
    C,
}

impl FromStr for MotionType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Self::A),
            "B" | "b" => Ok(Self::B),
            "C" | "c" => Ok(Self::C),
            other => Err(Error::Invalid(format!("unknown motion type {other:?} (expected A, B or C)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionSpec {
    pub kind: MotionType,
    /// Pan velocity `(dx, dy)` in pixels per frame; must be zero for type A.
    pub velocity: (f64, f64),
}

impl MotionSpec {
    /// Defaults: still, a (2, 0) pan, and a (1.5, 0.5) pan with oscillation.
    pub fn new(kind: MotionType) -> Self {
        let velocity = match kind {
            MotionType::A => (0.0, 0.0),
            MotionType::B => (2.0, 0.0),
            MotionType::C => (1.5, 0.5),
        };
        Self { kind, velocity }
    }

    pub fn validate(&self) -> Result<()> {
        let (vx, vy) = self.velocity;
        if !vx.is_finite() || !vy.is_finite() {
            return Err(Error::Invalid("velocity must be finite".into()));
        }
        if self.kind == MotionType::A && (vx, vy) != (0.0, 0.0) {
            return Err(Error::Invalid("type A clips have zero velocity".into()));
        }
        Ok(())
    }

    /// Scene offset at frame `t`.
    fn pan(&self, t: usize) -> (f64, f64) {
        let t = t as f64;
        let (vx, vy) = self.velocity;
        match self.kind {
            MotionType::A => (0.0, 0.0),
            MotionType::B => (vx * t, vy * t),
            MotionType::C => (vx * t + 3.0 * (1.3 * t).sin(), vy * t + 1.5 * (1.0 - (1.3 * t).cos())),
        }
    }
}

/// Frames `[T, 3, H, W]` and masks `[T, 1, H, W]` (1 = hole) in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub frames: Tensor,
    pub masks: Tensor,
    pub ground_truth: Option<Tensor>,
}

impl VideoClip {
    pub fn new(frames: Tensor, masks: Tensor, ground_truth: Option<Tensor>) -> Result<Self> {
        let fs = frames.shape();
        if fs.len() != 4 || fs[1] != 3 || fs[0] == 0 {
            return Err(Error::Invalid(format!("frames must be [T ≥ 1, 3, H, W], got {fs:?}")));
        }
        if masks.shape() != [fs[0], 1, fs[2], fs[3]] {
            return Err(Error::Invalid(format!("masks {:?} do not match frames {fs:?}", masks.shape())));
        }
        if masks.data().iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::Invalid("masks must be binary".into()));
        }
        if frames.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invalid("frame values must lie in [0, 1]".into()));
        }
        if let Some(gt) = &ground_truth {
            if gt.shape() != fs {
                return Err(Error::Invalid("ground truth must match the frames".into()));
            }
        }
        Ok(Self { frames, masks, ground_truth })
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Lattice value noise over a fixed rectangle of scene coordinates.
struct Texture {
    cell: f64,
    x0: i64,
    y0: i64,
    w: usize,
    h: usize,
    values: Vec<[f64; 3]>,
}

impl Texture {
    fn new(cell: f64, (xmin, xmax): (f64, f64), (ymin, ymax): (f64, f64), rng: &mut ChaCha8Rng) -> Self {
        let x0 = (xmin / cell).floor() as i64 - 1;
        let y0 = (ymin / cell).floor() as i64 - 1;
        let w = ((xmax / cell).ceil() as i64 - x0 + 2) as usize;
        let h = ((ymax / cell).ceil() as i64 - y0 + 2) as usize;
        let values = (0..w * h).map(|_| [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()]).collect();
        Self { cell, x0, y0, w, h, values }
    }

    fn at(&self, x: f64, y: f64) -> [f64; 3] {
        let (gx, gy) = (x / self.cell, y / self.cell);
        let (fx, fy) = (gx.floor(), gy.floor());
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        let (tx, ty) = (smooth(gx - fx), smooth(gy - fy));
        let ix = (fx as i64 - self.x0) as usize;
        let iy = (fy as i64 - self.y0) as usize;
        debug_assert!(ix + 1 < self.w && iy + 1 < self.h);
        let v = |i: usize, j: usize| self.values[j * self.w + i];
        let (a, b, c, d) = (v(ix, iy), v(ix + 1, iy), v(ix, iy + 1), v(ix + 1, iy + 1));
        std::array::from_fn(|k| {
            let top = a[k] + (b[k] - a[k]) * tx;
            let bot = c[k] + (d[k] - c[k]) * tx;
            top + (bot - top) * ty
        })
    }
}

/// A deterministic textured clip with all-valid masks; ground truth = frames.
pub fn synth_clip(spec: &MotionSpec, frames: usize, height: usize, width: usize, seed: u64) -> Result<VideoClip> {
    spec.validate()?;
    if height < 16 || width < 16 || frames == 0 {
        return Err(Error::Invalid(format!(
            "synthetic clips need H, W ≥ 16 and T ≥ 1 (got {frames}×{height}×{width})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pans: Vec<(f64, f64)> = (0..frames).map(|t| spec.pan(t)).collect();
    let span = |sel: fn(&(f64, f64)) -> f64, extent: usize| {
        let lo = pans.iter().map(sel).fold(f64::INFINITY, f64::min);
        let hi = pans.iter().map(sel).fold(f64::NEG_INFINITY, f64::max);
        (-hi, extent as f64 - lo)
    };
    let (xs, ys) = (span(|p| p.0, width), span(|p| p.1, height));
    let coarse = Texture::new(8.0, xs, ys, &mut rng);
    let fine = Texture::new(3.0, xs, ys, &mut rng);
    let colour: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.05..0.95));
    let radius = height.min(width) as f64 / 6.0;
    let (cx0, cy0) = (width as f64 / 2.0, height as f64 / 2.0);

    let plane = height * width;
    let mut data = vec![0.0; frames * 3 * plane];
    for (t, &(px, py)) in pans.iter().enumerate() {
        let (dcx, dcy) = match spec.kind {
            MotionType::C => {
                let a = 0.9 * t as f64;
                (cx0 + radius * a.cos(), cy0 + radius * 0.6 * a.sin())
            }
            _ => (cx0 + px, cy0 + py),
        };
        for y in 0..height {
            for x in 0..width {
                let (sx, sy) = (x as f64 - px, y as f64 - py);
                let (xf, yf) = (x as f64, y as f64);
                let inside = (xf - dcx).powi(2) + (yf - dcy).powi(2) <= radius * radius;
                let rgb = if inside {
                    colour
                } else {
                    let (c, f) = (coarse.at(sx, sy), fine.at(sx, sy));
                    std::array::from_fn(|k| 0.15 + 0.7 * (0.7 * c[k] + 0.3 * f[k]))
                };
                for (k, v) in rgb.into_iter().enumerate() {
                    data[(t * 3 + k) * plane + y * width + x] = v;
                }
            }
        }
    }
    let frames_t = Tensor::new(&[frames, 3, height, width], data)?;
    let masks = Tensor::zeros(&[frames, 1, height, width]);
    VideoClip::new(frames_t.clone(), masks, Some(frames_t))
}
