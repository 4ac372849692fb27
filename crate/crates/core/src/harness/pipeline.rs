//! Sliding-window inpainting of a whole clip.

use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::harness::window::{sliding_window_schedule, WindowConfig};
use crate::model::{generate, GeneratorConfig, SpectralState};
use crate::mppa::AttentionDump;
use crate::numerics::{Graph, Tensor};
use crate::params::{Bound, ParamStore};

/// Power iterations used when spectral norm is applied at inference.
const INFERENCE_POWER_ITERS: usize = 20;

#[derive(Serialize)]
struct GateRecord {
    target: usize,
    block: usize,
    frames: Vec<usize>,
    spatial: f64,
    temporal: f64,
}

fn gather_frames(t: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let parts: Vec<Tensor> = indices.iter().map(|&i| t.index_first(i - 1)).collect();
    Tensor::stack(&parts)
}

/// Complete every frame, each from its own window of frames. With `dump`,
/// attention maps of every head and branch and the gate weights are
/// written there.
pub fn inpaint_clip(
    frames: &Tensor,
    masks: &Tensor,
    params: &ParamStore,
    cfg: &GeneratorConfig,
    window: &WindowConfig,
    dump: Option<&Path>,
) -> Result<Tensor> {
    let total = frames.shape()[0];
    let mut sn = cfg.spectral_norm.then(|| SpectralState::new(INFERENCE_POWER_ITERS));
    let mut out = Vec::with_capacity(total);
    let mut gates = Vec::new();
    for t in 1..=total {
        let w = sliding_window_schedule(t, total, window.neighbors, window.stride)?;
        let mut g = Graph::new();
        let mut b = Bound::new(params, false);
        let x = g.constant(gather_frames(frames, &w.indices)?);
        let m = g.constant(gather_frames(masks, &w.indices)?);
        let res = generate(&mut g, &mut b, cfg, x, m, sn.as_mut())?;
        out.push(g.value(res.composite).index_first(w.target_position()));
        if let Some(dir) = dump {
            for (bi, block) in res.blocks.iter().enumerate() {
                for (hi, maps) in block.sta.maps.iter().enumerate() {
                    let stem = format!("t{t:05}_block{bi}_head{hi}");
                    AttentionDump::capture(&g, format!("{stem}_spatial"), &maps.spatial).write(dir)?;
                    if let Some(tm) = &maps.temporal {
                        AttentionDump::capture(&g, format!("{stem}_temporal"), tm).write(dir)?;
                    }
                }
                let gate = g.value(block.sta.gate).data();
                gates.push(GateRecord {
                    target: t,
                    block: bi,
                    frames: w.indices.clone(),
                    spatial: gate[0],
                    temporal: gate[1],
                });
            }
        }
    }
    if let Some(dir) = dump {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("gates.json"), serde_json::to_vec_pretty(&gates)?)?;
    }
    Tensor::stack(&out)
}
