//! Spatial/temporal attention branches fused by a motion-guided gate.
//!
//! Each query attends separately to the patches of its own frame (spatial
//! branch) and to the patches of every other frame (temporal branch). Branch
//! outputs are reassembled into frames, offset by a projection of the motion
//! descriptor θ′, and blended with one learned weight pair per video.

use rand::Rng;

use crate::depth::AlignedSet;
use crate::error::{shape_err, Error, Result};
use crate::mppa::{mppa_branch, AttentionMap, Branch, MppaConfig};
use crate::numerics::{Graph, Tensor, Var};
use crate::params::{init_specs, Bound, Init, ParamSpec, ParamStore};
use crate::patch::{reassemble_tokens, PatchSet};

/// Query patches with their aligned keys and values for one head.
#[derive(Clone, Copy, Debug)]
pub struct HeadInputs {
    pub query: PatchSet,
    pub key: AlignedSet,
    pub value: AlignedSet,
}

#[derive(Clone, Copy, Debug)]
pub struct StaWeights {
    /// `[d_m, C]` motion projections added to each branch.
    pub motion_s: Var,
    pub motion_t: Var,
    pub gate_w1: Var,
    pub gate_b1: Var,
    /// Zero at initialisation, so the gate starts at (0.5, 0.5).
    pub gate_w2: Var,
    pub gate_b2: Var,
}

pub fn sta_specs(prefix: &str, channels: usize, motion_dim: usize, hidden: usize) -> Vec<ParamSpec> {
    let motion = Init::Uniform { fan_in: motion_dim, gain: 0.1 };
    vec![
        ParamSpec::new(format!("{prefix}.motion_s"), &[motion_dim, channels], motion.clone()),
        ParamSpec::new(format!("{prefix}.motion_t"), &[motion_dim, channels], motion),
        ParamSpec::new(format!("{prefix}.gate.w1"), &[motion_dim, hidden], Init::Uniform { fan_in: motion_dim, gain: 1.0 }),
        ParamSpec::new(format!("{prefix}.gate.b1"), &[hidden], Init::Zeros),
        ParamSpec::new(format!("{prefix}.gate.w2"), &[hidden, 2], Init::Zeros),
        ParamSpec::new(format!("{prefix}.gate.b2"), &[2], Init::Zeros),
    ]
}

pub fn init_sta(store: &mut ParamStore, prefix: &str, channels: usize, motion_dim: usize, hidden: usize, rng: &mut impl Rng) {
    init_specs(store, &sta_specs(prefix, channels, motion_dim, hidden), rng).expect("gate specs are consistent");
}

impl StaWeights {
    pub fn bind(g: &mut Graph, params: &mut Bound<'_>, prefix: &str) -> Result<Self> {
        Ok(Self {
            motion_s: params.var(g, &format!("{prefix}.motion_s"))?,
            motion_t: params.var(g, &format!("{prefix}.motion_t"))?,
            gate_w1: params.var(g, &format!("{prefix}.gate.w1"))?,
            gate_b1: params.var(g, &format!("{prefix}.gate.b1"))?,
            gate_w2: params.var(g, &format!("{prefix}.gate.w2"))?,
            gate_b2: params.var(g, &format!("{prefix}.gate.b2"))?,
        })
    }
}

/// Attention maps of one head.
#[derive(Clone, Copy, Debug)]
pub struct HeadMaps {
    pub spatial: AttentionMap,
    pub temporal: Option<AttentionMap>,
}

#[derive(Clone, Debug)]
pub struct StaOutput {
    /// `[T, C, h, w]`.
    pub fused: Var,
    pub spatial: Var,
    /// Absent when the clip has a single frame.
    pub temporal: Option<Var>,
    /// `[1, 2]` holding `(w_s, w_t)`.
    pub gate: Var,
    pub maps: Vec<HeadMaps>,
    pub warning: Option<String>,
}

fn add_motion(g: &mut Graph, feat: Var, theta_prime: Var, proj: Var) -> Result<Var> {
    let c = g.shape(feat)[1];
    let m = g.matmul(theta_prime, proj)?;
    let m = g.reshape(m, &[1, c, 1, 1])?;
    g.add(feat, m)
}

/// Gate weights `softmax(W2·tanh(W1·θ′ + b1) + b2)` and the blended features.
pub fn gate_fuse(g: &mut Graph, fs: Var, ft: Var, theta_prime: Var, w: &StaWeights) -> Result<(Var, Var)> {
    if g.shape(fs) != g.shape(ft) {
        return Err(shape_err("gate_fuse", format!("{:?} vs {:?}", g.shape(fs), g.shape(ft))));
    }
    let h = g.matmul(theta_prime, w.gate_w1)?;
    let h = g.add(h, w.gate_b1)?;
    let h = g.tanh(h);
    let logits = g.matmul(h, w.gate_w2)?;
    let logits = g.add(logits, w.gate_b2)?;
    let gate = g.softmax(logits, 1)?;
    let ws = g.slice(gate, 1, 0..1)?;
    let wt = g.slice(gate, 1, 1..2)?;
    let rank = g.shape(fs).len();
    let bshape = vec![1; rank];
    let ws = g.reshape(ws, &bshape)?;
    let wt = g.reshape(wt, &bshape)?;
    let a = g.mul(fs, ws)?;
    let b = g.mul(ft, wt)?;
    let fused = g.add(a, b)?;
    Ok((fused, gate))
}

/// Run both branches over every head, add the motion encoding and fuse.
pub fn sta_forward(
    g: &mut Graph,
    heads: &[HeadInputs],
    theta_prime: Var,
    w: &StaWeights,
    cfg: &MppaConfig,
) -> Result<StaOutput> {
    let first = heads.first().ok_or_else(|| Error::Invalid("no attention heads".into()))?;
    let frames = first.query.geometry.frames;
    let temporal = frames >= 2;
    let mut s_parts = Vec::with_capacity(heads.len());
    let mut t_parts = Vec::with_capacity(heads.len());
    let mut maps = Vec::with_capacity(heads.len());
    for h in heads {
        let geo = h.query.geometry;
        if geo.frames != frames {
            return Err(shape_err("sta_forward", "heads disagree on the frame count"));
        }
        let s = mppa_branch(g, &h.query, &h.key, &h.value, cfg, Branch::Spatial)?;
        s_parts.push(reassemble_tokens(g, s.output, &geo)?);
        let tmap = if temporal {
            let t = mppa_branch(g, &h.query, &h.key, &h.value, cfg, Branch::Temporal)?;
            t_parts.push(reassemble_tokens(g, t.output, &geo)?);
            Some(t.map)
        } else {
            None
        };
        maps.push(HeadMaps {
            spatial: s.map,
            temporal: tmap,
        });
    }
    let fs = g.concat(&s_parts, 1)?;
    let fs = add_motion(g, fs, theta_prime, w.motion_s)?;
    if !temporal {
        let msg = format!("clip has {frames} frame(s); temporal branch skipped, spatial weight fixed to 1");
        log::warn!("{msg}");
        let gate = g.constant(Tensor::new(&[1, 2], vec![1.0, 0.0])?);
        return Ok(StaOutput {
            fused: fs,
            spatial: fs,
            temporal: None,
            gate,
            maps,
            warning: Some(msg),
        });
    }
    let ft = g.concat(&t_parts, 1)?;
    let ft = add_motion(g, ft, theta_prime, w.motion_t)?;
    let (fused, gate) = gate_fuse(g, fs, ft, theta_prime, w)?;
    Ok(StaOutput {
        fused,
        spatial: fs,
        temporal: Some(ft),
        gate,
        maps,
        warning: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patch::{extract_patch_channels, Role};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn weights(g: &mut Graph, store: &ParamStore) -> StaWeights {
        let mut b = Bound::new(store, true);
        StaWeights::bind(g, &mut b, "sta").unwrap()
    }

    fn store(c: usize) -> ParamStore {
        let mut s = ParamStore::new();
        init_sta(&mut s, "sta", c, 6, 8, &mut ChaCha8Rng::seed_from_u64(3));
        s
    }

    fn head(g: &mut Graph, t: usize, c: usize, hw: usize, n: usize) -> HeadInputs {
        let f = g.constant(Tensor::rand_uniform(&[t, c, hw, hw], -1.0, 1.0, 11));
        let m = g.constant(Tensor::zeros(&[t, 1, hw, hw]));
        let q = extract_patch_channels(g, f, m, n, 0..c, Role::Query).unwrap();
        let k = AlignedSet::shared(&q, q.geometry.tokens());
        HeadInputs { query: q, key: k, value: k }
    }

    #[test]
    fn zero_gate_is_even_and_saturated_gate_is_spatial() {
        let st = store(2);
        let mut g = Graph::new();
        let w = weights(&mut g, &st);
        let fs = g.constant(Tensor::rand_uniform(&[2, 2, 3, 3], -1.0, 1.0, 1));
        let ft = g.constant(Tensor::rand_uniform(&[2, 2, 3, 3], -1.0, 1.0, 2));
        let tp = g.constant(Tensor::rand_uniform(&[1, 6], -1.0, 1.0, 3));
        let (fused, gate) = gate_fuse(&mut g, fs, ft, tp, &w).unwrap();
        assert_eq!(g.value(gate).data(), &[0.5, 0.5]);
        let want = g.value(fs).zip_map(g.value(ft), |a, b| (a + b) / 2.0).unwrap();
        assert!(g.value(fused).max_abs_diff(&want) < 1e-15);

        let mut st2 = st.clone();
        st2.insert("sta.gate.b2", Tensor::new(&[2], vec![30.0, -30.0]).unwrap());
        let mut g = Graph::new();
        let w = weights(&mut g, &st2);
        let fs = g.constant(Tensor::rand_uniform(&[2, 2, 3, 3], -1.0, 1.0, 1));
        let ft = g.constant(Tensor::rand_uniform(&[2, 2, 3, 3], -1.0, 1.0, 2));
        let tp = g.constant(Tensor::zeros(&[1, 6]));
        let (fused, gate) = gate_fuse(&mut g, fs, ft, tp, &w).unwrap();
        assert!(g.value(gate).data()[0] >= 1.0 - 1e-9);
        assert!(g.value(fused).max_abs_diff(g.value(fs)) < 1e-9);
    }

    #[test]
    fn branch_shapes_for_three_frames() {
        let st = store(2);
        let mut g = Graph::new();
        let w = weights(&mut g, &st);
        let h = head(&mut g, 3, 2, 4, 2);
        let tp = g.constant(Tensor::zeros(&[1, 6]));
        let out = sta_forward(&mut g, &[h], tp, &w, &MppaConfig::default()).unwrap();
        let m = out.maps[0];
        assert_eq!(m.spatial.layout.entries(), 3 * 16);
        assert_eq!(m.temporal.unwrap().layout.entries(), 3 * 32);
        // Rows of each branch sum to one and vanish outside the branch.
        for map in [m.spatial, m.temporal.unwrap()] {
            let s = g.value(map.scores);
            for q in 0..12 {
                let keys = map.layout.keys_of(q);
                let row: f64 = keys.iter().map(|&k| s.get(&[q, k])).sum();
                assert!((row - 1.0).abs() < 1e-12);
                let outside: f64 = (0..12).filter(|k| !keys.contains(k)).map(|k| s.get(&[q, k]).abs()).sum();
                assert_eq!(outside, 0.0);
            }
        }
        assert_eq!(g.shape(out.fused), &[3, 2, 4, 4]);
    }

    #[test]
    fn single_frame_falls_back_to_spatial() {
        let st = store(2);
        let mut g = Graph::new();
        let w = weights(&mut g, &st);
        let h = head(&mut g, 1, 2, 4, 2);
        let tp = g.constant(Tensor::zeros(&[1, 6]));
        let out = sta_forward(&mut g, &[h], tp, &w, &MppaConfig::default()).unwrap();
        assert!(out.warning.is_some() && out.temporal.is_none());
        assert_eq!(g.value(out.fused).data(), g.value(out.spatial).data());
        assert_eq!(g.value(out.gate).data(), &[1.0, 0.0]);
    }
}
