//! Frame selection around a target: a dense neighbourhood plus a sparse
//! set of distant reference frames. Indices are 1-based.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowConfig {
    /// Neighbour half-width `n_w`.
    pub neighbors: usize,
    /// Distant-frame stride `s`.
    pub stride: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self { neighbors: 2, stride: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameWindow {
    pub target: usize,
    pub neighbors: usize,
    pub stride: usize,
    /// Sorted, duplicate-free, within `[1, T]`, always containing `target`.
    pub indices: Vec<usize>,
}

impl FrameWindow {
    /// Position of the target inside `indices`.
    pub fn target_position(&self) -> usize {
        self.indices.binary_search(&self.target).expect("target is always included")
    }
}

pub fn sliding_window_schedule(t: usize, total: usize, neighbors: usize, stride: usize) -> Result<FrameWindow> {
    if t == 0 || t > total {
        return Err(Error::Invalid(format!("target {t} outside [1, {total}]")));
    }
    if stride == 0 {
        return Err(Error::Invalid("distant stride must be ≥ 1".into()));
    }
    let lo = t.saturating_sub(neighbors).max(1);
    let hi = (t + neighbors).min(total);
    let mut indices: Vec<usize> = (lo..=hi).chain((1..=total).step_by(stride)).collect();
    indices.sort_unstable();
    indices.dedup();
    Ok(FrameWindow {
        target: t,
        neighbors,
        stride,
        indices,
    })
}
