//! Patch token sets: query/key/value embedding, extraction and reassembly.
//!
//! Tokens are laid out frame-major, then in row-major patch raster order:
//! token `t * n² + i * n + j` is the patch in grid row `i`, column `j` of frame `t`.

use std::ops::Range;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Query,
    Key,
    Value,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGeometry {
    pub frames: usize,
    /// Patches per side; `n²` patches per frame.
    pub n: usize,
    pub channels: usize,
    pub patch_h: usize,
    pub patch_w: usize,
}

impl PatchGeometry {
    pub fn per_frame(&self) -> usize {
        self.n * self.n
    }

    pub fn tokens(&self) -> usize {
        self.frames * self.per_frame()
    }

    pub fn area(&self) -> usize {
        self.patch_h * self.patch_w
    }

    pub fn frame_of(&self, token: usize) -> usize {
        token / self.per_frame()
    }

    /// `(row, col)` of a token inside its frame's patch grid.
    pub fn cell_of(&self, token: usize) -> (usize, usize) {
        let k = token % self.per_frame();
        (k / self.n, k % self.n)
    }
}

/// Patch tokens `[N, c, h_p, w_p]` with validity `[N, 1, h_p, w_p]`.
#[derive(Clone, Copy, Debug)]
pub struct PatchSet {
    pub tokens: Var,
    pub valid: Var,
    pub geometry: PatchGeometry,
    pub role: Role,
}

impl PatchSet {
    /// Build from existing graph values, checking shapes against `geometry`.
    pub fn from_parts(g: &Graph, tokens: Var, valid: Var, geometry: PatchGeometry, role: Role) -> Result<Self> {
        let want_t = [geometry.tokens(), geometry.channels, geometry.patch_h, geometry.patch_w];
        let want_v = [geometry.tokens(), 1, geometry.patch_h, geometry.patch_w];
        if g.shape(tokens) != want_t || g.shape(valid) != want_v {
            return Err(shape_err(
                "PatchSet",
                format!("tokens {:?} / valid {:?} vs geometry {:?}", g.shape(tokens), g.shape(valid), geometry),
            ));
        }
        Ok(Self {
            tokens,
            valid,
            geometry,
            role,
        })
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }
}

/// Patch-grid sizes and channel split for the attention heads.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub patch_grids: Vec<usize>,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            patch_grids: vec![2, 3, 6, 12],
        }
    }
}

impl HeadConfig {
    pub fn heads(&self) -> usize {
        self.patch_grids.len()
    }

    /// Channels are split equally; `channels` must be a multiple of the head count.
    pub fn channel_ranges(&self, channels: usize) -> Result<Vec<Range<usize>>> {
        let h = self.heads();
        if h == 0 || channels % h != 0 {
            return Err(Error::Invalid(format!("{channels} channels cannot be split over {h} heads")));
        }
        let per = channels / h;
        Ok((0..h).map(|i| i * per..(i + 1) * per).collect())
    }

    pub fn validate(&self, channels: usize, h: usize, w: usize) -> Result<()> {
        self.channel_ranges(channels)?;
        for &n in &self.patch_grids {
            if n == 0 || h % n != 0 || w % n != 0 {
                return Err(Error::Divisibility { n, h, w });
            }
        }
        Ok(())
    }

    /// Grid size of the coarsest head (fewest patches).
    pub fn coarsest(&self) -> usize {
        self.patch_grids.iter().copied().min().unwrap_or(1)
    }
}

/// Three 1×1 convolutions `[c, c, 1, 1]` with biases `[c]`.
#[derive(Clone, Copy, Debug)]
pub struct QkvWeights {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
}

pub fn embed_qkv(g: &mut Graph, feat: Var, w: &QkvWeights) -> Result<(Var, Var, Var)> {
    let c = *g.shape(feat).get(1).ok_or_else(|| shape_err("embed_qkv", "feature must be [T, c, h, w]"))?;
    for wt in [w.wq, w.wk, w.wv] {
        let s = g.shape(wt);
        if s != [c, c, 1, 1] {
            return Err(shape_err("embed_qkv", format!("weight {s:?} for {c} channels, expected [{c}, {c}, 1, 1]")));
        }
    }
    let q = g.conv2d(feat, w.wq, Some(w.bq), 1, 0)?;
    let k = g.conv2d(feat, w.wk, Some(w.bk), 1, 0)?;
    let v = g.conv2d(feat, w.wv, Some(w.bv), 1, 0)?;
    Ok((q, k, v))
}

/// Area-average a `[T, 1, H, W]` hole mask down to `h × w`; any hole pixel in a
/// cell makes that cell a hole.
pub fn downsample_mask(mask: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let s = mask.shape();
    if s.len() != 4 || s[1] != 1 || h == 0 || w == 0 || s[2] % h != 0 || s[3] % w != 0 {
        return Err(shape_err("downsample_mask", format!("mask {s:?} to {h}x{w}")));
    }
    let (fy, fx) = (s[2] / h, s[3] / w);
    Ok(Tensor::from_fn(&[s[0], 1, h, w], |i| {
        let mut acc = 0.0;
        for y in 0..fy {
            for x in 0..fx {
                acc += mask.get(&[i[0], 0, i[2] * fy + y, i[3] * fx + x]);
            }
        }
        if acc / (fy * fx) as f64 > 0.0 {
            1.0
        } else {
            0.0
        }
    }))
}

fn patch_index(t: usize, c: Range<usize>, c_total: usize, h: usize, w: usize, n: usize) -> Vec<usize> {
    let (hp, wp) = (h / n, w / n);
    let mut index = Vec::with_capacity(t * n * n * c.len() * hp * wp);
    for f in 0..t {
        for pi in 0..n {
            for pj in 0..n {
                for ch in c.clone() {
                    for y in 0..hp {
                        let row = ((f * c_total + ch) * h + pi * hp + y) * w + pj * wp;
                        index.extend(row..row + wp);
                    }
                }
            }
        }
    }
    index
}

/// Patch a channel slice of `feat[T, c, h, w]`; `mask[T, 1, h, w]` is at feature
/// resolution with 1 marking holes.
pub fn extract_patch_channels(
    g: &mut Graph,
    feat: Var,
    mask: Var,
    n: usize,
    channels: Range<usize>,
    role: Role,
) -> Result<PatchSet> {
    let s = g.shape(feat).to_vec();
    if s.len() != 4 {
        return Err(shape_err("extract_patches", format!("feature {s:?} must be [T, c, h, w]")));
    }
    let (t, c, h, w) = (s[0], s[1], s[2], s[3]);
    if n == 0 || h % n != 0 || w % n != 0 {
        return Err(Error::Divisibility { n, h, w });
    }
    if g.shape(mask) != [t, 1, h, w] {
        return Err(shape_err("extract_patches", format!("mask {:?} vs feature {s:?}", g.shape(mask))));
    }
    if channels.end > c || channels.is_empty() {
        return Err(shape_err("extract_patches", format!("channel range {channels:?} of {c}")));
    }
    let geometry = PatchGeometry {
        frames: t,
        n,
        channels: channels.len(),
        patch_h: h / n,
        patch_w: w / n,
    };
    let tok_shape = [geometry.tokens(), channels.len(), geometry.patch_h, geometry.patch_w];
    let tokens = g.gather(feat, Rc::new(patch_index(t, channels, c, h, w, n)), &tok_shape)?;
    let valid_full = {
        let one = g.constant(Tensor::scalar(1.0));
        g.sub(one, mask)?
    };
    let val_shape = [geometry.tokens(), 1, geometry.patch_h, geometry.patch_w];
    let valid = g.gather(valid_full, Rc::new(patch_index(t, 0..1, 1, h, w, n)), &val_shape)?;
    Ok(PatchSet {
        tokens,
        valid,
        geometry,
        role,
    })
}

pub fn extract_patches(g: &mut Graph, feat: Var, mask: Var, n: usize, role: Role) -> Result<PatchSet> {
    let c = *g.shape(feat).get(1).unwrap_or(&0);
    extract_patch_channels(g, feat, mask, n, 0..c, role)
}

/// Inverse of the extraction layout for an arbitrary `[T·n², c, h_p, w_p]` tensor.
pub fn reassemble_tokens(g: &mut Graph, tokens: Var, geometry: &PatchGeometry) -> Result<Var> {
    let want = [geometry.tokens(), geometry.channels, geometry.patch_h, geometry.patch_w];
    if g.shape(tokens) != want {
        return Err(shape_err("reassemble", format!("tokens {:?} vs geometry {want:?}", g.shape(tokens))));
    }
    let (t, n, c) = (geometry.frames, geometry.n, geometry.channels);
    let (hp, wp) = (geometry.patch_h, geometry.patch_w);
    let (h, w) = (hp * n, wp * n);
    let mut index = Vec::with_capacity(t * c * h * w);
    for f in 0..t {
        for ch in 0..c {
            for y in 0..h {
                let (pi, py) = (y / hp, y % hp);
                for x in 0..w {
                    let (pj, px) = (x / wp, x % wp);
                    let tok = f * n * n + pi * n + pj;
                    index.push(((tok * c + ch) * hp + py) * wp + px);
                }
            }
        }
    }
    g.gather(tokens, Rc::new(index), &[t, c, h, w])
}

pub fn reassemble(g: &mut Graph, p: &PatchSet) -> Result<Var> {
    reassemble_tokens(g, p.tokens, &p.geometry)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(t: usize, c: usize, h: usize, w: usize, seed: u64) -> (Graph, Var, Var) {
        let mut g = Graph::new();
        let f = g.constant(Tensor::rand_uniform(&[t, c, h, w], -1.0, 1.0, seed));
        let m = g.constant(Tensor::zeros(&[t, 1, h, w]));
        (g, f, m)
    }

    #[test]
    fn token_count_for_full_size_feature_map() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::zeros(&[5, 2, 60, 108]));
        let m = g.constant(Tensor::zeros(&[5, 1, 60, 108]));
        let p = extract_patches(&mut g, f, m, 2, Role::Query).unwrap();
        assert_eq!(g.shape(p.tokens), &[20, 2, 30, 54]);
        assert_eq!(p.geometry.tokens(), 20);
    }

    #[test]
    fn single_patch_is_the_frame() {
        let (mut g, f, m) = setup(3, 2, 4, 6, 1);
        let p = extract_patches(&mut g, f, m, 1, Role::Key).unwrap();
        assert_eq!(g.value(p.tokens), g.value(f));
    }

    #[test]
    fn round_trip_all_head_grids() {
        for n in [2, 3, 6, 12] {
            let (mut g, f, m) = setup(2, 3, 60, 108, n as u64);
            let p = extract_patches(&mut g, f, m, n, Role::Value).unwrap();
            let back = reassemble(&mut g, &p).unwrap();
            assert_eq!(g.value(back), g.value(f), "n = {n}");
        }
    }

    #[test]
    fn divisibility_error_names_sizes() {
        let (mut g, f, m) = setup(1, 1, 10, 12, 0);
        let err = extract_patches(&mut g, f, m, 3, Role::Query).unwrap_err();
        assert!(matches!(err, Error::Divisibility { n: 3, h: 10, w: 12 }));
    }

    #[test]
    fn permuted_tokens_move_blocks() {
        // 1 frame, 2×2 grid of 1×1 patches, single channel: tokens [a, b, c, d]
        let mut g = Graph::new();
        let geom = PatchGeometry {
            frames: 1,
            n: 2,
            channels: 1,
            patch_h: 1,
            patch_w: 1,
        };
        // swap tokens 0 and 3
        let toks = g.constant(Tensor::new(&[4, 1, 1, 1], vec![4.0, 2.0, 3.0, 1.0]).unwrap());
        let img = reassemble_tokens(&mut g, toks, &geom).unwrap();
        assert_eq!(g.value(img).data(), &[4.0, 2.0, 3.0, 1.0]);
        // 2×2 patches of a 4×4 frame: token 1 is the top-right block
        let geom = PatchGeometry {
            frames: 1,
            n: 2,
            channels: 1,
            patch_h: 2,
            patch_w: 2,
        };
        let toks = g.constant(Tensor::from_fn(&[4, 1, 2, 2], |i| i[0] as f64));
        let img = reassemble_tokens(&mut g, toks, &geom).unwrap();
        let v = g.value(img);
        assert_eq!(v.get(&[0, 0, 0, 3]), 1.0);
        assert_eq!(v.get(&[0, 0, 3, 0]), 2.0);
        assert_eq!(v.get(&[0, 0, 2, 2]), 3.0);
    }

    #[test]
    fn valid_is_complement_of_mask() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let m = g.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let p = extract_patches(&mut g, f, m, 2, Role::Query).unwrap();
        assert_eq!(g.value(p.valid).data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn mask_downsampling_is_conservative() {
        let mut m = Tensor::zeros(&[1, 1, 4, 4]);
        m.set(&[0, 0, 0, 0], 1.0);
        let d = downsample_mask(&m, 2, 2).unwrap();
        assert_eq!(d.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn embedding_identity_and_zero() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::rand_uniform(&[2, 3, 4, 4], -1.0, 1.0, 3));
        let eye = Tensor::from_fn(&[3, 3, 1, 1], |i| if i[0] == i[1] { 1.0 } else { 0.0 });
        let wq = g.constant(eye);
        let wz = g.constant(Tensor::zeros(&[3, 3, 1, 1]));
        let b = g.constant(Tensor::zeros(&[3]));
        let w = QkvWeights {
            wq,
            bq: b,
            wk: wz,
            bk: b,
            wv: wz,
            bv: b,
        };
        let (q, k, _) = embed_qkv(&mut g, f, &w).unwrap();
        assert_eq!(g.value(q), g.value(f));
        assert!(g.value(k).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn head_config_checks() {
        let hc = HeadConfig::default();
        assert!(hc.validate(16, 12, 12).is_ok());
        assert!(hc.validate(16, 60, 108).is_ok());
        assert!(hc.validate(16, 8, 8).is_err());
        assert!(hc.validate(10, 12, 12).is_err());
        assert_eq!(hc.coarsest(), 2);
        assert_eq!(hc.channel_ranges(16).unwrap()[3], 12..16);
    }
}
