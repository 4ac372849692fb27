//! Mask-pruned patch attention.
//!
//! For a query patch `q` and an aligned key patch `k→q`:
//!
//! * `C(q,k) = Σ V_q·f_q · V_k·f_k` over channels and pixels (hole pixels drop out),
//! * `S(q,k) = Σ V_q·V_k / Z` with `Z` the patch area by default,
//! * `Attn = C·S`, `α = softmax_k(Attn)`, `out_q = Σ_k α·f_v`.
//!
//! Without holes and with identity alignment this is plain unscaled dot-product
//! attention over flattened patches.

use std::fs;
use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::depth::AlignedSet;
use crate::error::{shape_err, Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::patch::{PatchGeometry, PatchSet};

/// Guards the query/key saliency normalisers against empty validity.
const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaliencyNorm {
    /// Divide by `h_p·w_p`.
    #[default]
    Area,
    /// Divide by the query's valid mass.
    Query,
    /// Divide by the aligned key's valid mass.
    Key,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MppaConfig {
    pub saliency_norm: SaliencyNorm,
    /// Divide `Attn` by √(c·h_p·w_p).
    pub scaled: bool,
}

/// Which keys a row of an attention map ranges over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// Every key.
    Full,
    /// Keys in the query's own frame.
    Spatial,
    /// Keys in every other frame.
    Temporal,
}

impl Branch {
    pub fn contains(self, query_frame: usize, key_frame: usize) -> bool {
        match self {
            Branch::Full => true,
            Branch::Spatial => query_frame == key_frame,
            Branch::Temporal => query_frame != key_frame,
        }
    }
}

/// Token layout of an attention map: `frames × per_frame` rows and columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockLayout {
    pub frames: usize,
    pub per_frame: usize,
    pub branch: Branch,
}

impl BlockLayout {
    pub fn of(geo: &PatchGeometry, branch: Branch) -> Self {
        Self {
            frames: geo.frames,
            per_frame: geo.per_frame(),
            branch,
        }
    }

    pub fn tokens(&self) -> usize {
        self.frames * self.per_frame
    }

    /// Key columns visible to query row `q`, ascending.
    pub fn keys_of(&self, q: usize) -> Vec<usize> {
        let m = q / self.per_frame;
        (0..self.tokens())
            .filter(|&k| self.branch.contains(m, k / self.per_frame))
            .collect()
    }

    /// Number of map entries inside the branch.
    pub fn entries(&self) -> usize {
        (0..self.tokens()).map(|q| self.keys_of(q).len()).sum()
    }
}

/// Post-softmax weights and raw `Attn`, both `[N_q, N_k]` and zero outside the branch.
#[derive(Clone, Copy, Debug)]
pub struct AttentionMap {
    pub scores: Var,
    pub raw: Var,
    pub layout: BlockLayout,
}

#[derive(Clone, Copy, Debug)]
pub struct MppaOutput {
    /// `[N_q, c, h_p, w_p]`.
    pub output: Var,
    pub map: AttentionMap,
}

fn check_pair(g: &Graph, fq: &PatchSet, k: &AlignedSet) -> Result<()> {
    let (a, b) = (fq.geometry, k.geometry);
    if a.channels != b.channels || a.patch_h != b.patch_h || a.patch_w != b.patch_w || k.queries != a.tokens() {
        return Err(shape_err("mppa", format!("query {a:?} vs aligned key {b:?} for {} queries", k.queries)));
    }
    let rows = if k.per_pair { k.queries * k.keys() } else { k.keys() };
    if g.shape(k.tokens)[0] != rows || g.shape(k.valid)[0] != rows {
        return Err(shape_err("mppa", format!("aligned set holds {:?}, expected {rows} rows", g.shape(k.tokens))));
    }
    Ok(())
}

/// `[N_q, N_k]` inner products of per-query rows `a[N_q, D]` with key rows `b`
/// (`[N_k, D]` shared or `[N_q·N_k, D]` per pair).
fn pair_dot(g: &mut Graph, a: Var, b: Var, nq: usize, nk: usize, per_pair: bool) -> Result<Var> {
    let d = g.shape(a)[1];
    if per_pair {
        let b = g.reshape(b, &[nq, nk, d])?;
        let a = g.reshape(a, &[nq, d, 1])?;
        let r = g.matmul(b, a)?;
        g.reshape(r, &[nq, nk])
    } else {
        let bt = g.permute(b, &[1, 0])?;
        g.matmul(a, bt)
    }
}

fn flat_rows(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    g.reshape(x, &[s[0], s[1..].iter().product()])
}

fn masked_rows(g: &mut Graph, tokens: Var, valid: Var) -> Result<Var> {
    let m = g.mul(tokens, valid)?;
    flat_rows(g, m)
}

/// Key-side rows entering one attention computation: masked tokens
/// `[rows, D]` and validity `[rows, area]`, either shared by every query
/// (`rows = nk`) or listed per query (`rows = nq·nk`).
struct KeyRows {
    masked: Var,
    valid: Var,
    nk: usize,
    per_pair: bool,
}

impl KeyRows {
    fn all(g: &mut Graph, fk: &AlignedSet) -> Result<Self> {
        Ok(Self {
            masked: masked_rows(g, fk.tokens, fk.valid)?,
            valid: flat_rows(g, fk.valid)?,
            nk: fk.keys(),
            per_pair: fk.per_pair,
        })
    }

    /// Per-query selection of the branch's keys; `rows[q·width + j]` indexes
    /// the rows of `fk`.
    fn select(g: &mut Graph, fk: &AlignedSet, rows: &Rc<Vec<usize>>, width: usize) -> Result<Self> {
        let masked = masked_rows(g, fk.tokens, fk.valid)?;
        let valid = flat_rows(g, fk.valid)?;
        Ok(Self {
            masked: g.gather_rows(masked, rows.clone())?,
            valid: g.gather_rows(valid, rows.clone())?,
            nk: width,
            per_pair: true,
        })
    }
}

fn correlation_rows(g: &mut Graph, fq: &PatchSet, keys: &KeyRows) -> Result<Var> {
    let a = masked_rows(g, fq.tokens, fq.valid)?;
    pair_dot(g, a, keys.masked, fq.geometry.tokens(), keys.nk, keys.per_pair)
}

fn saliency_rows(g: &mut Graph, fq: &PatchSet, keys: &KeyRows, norm: SaliencyNorm) -> Result<Var> {
    let (nq, nk) = (fq.geometry.tokens(), keys.nk);
    let area = fq.geometry.area();
    let vq = flat_rows(g, fq.valid)?;
    let overlap = pair_dot(g, vq, keys.valid, nq, nk, keys.per_pair)?;
    match norm {
        SaliencyNorm::Area => Ok(g.scale(overlap, 1.0 / area as f64)),
        SaliencyNorm::Query => {
            let z = g.sum_axis(vq, 1)?;
            let z = g.add_scalar(z, NORM_EPS);
            g.div(overlap, z)
        }
        SaliencyNorm::Key => {
            let z = g.sum_axis(keys.valid, 1)?;
            let z = if keys.per_pair {
                g.reshape(z, &[nq, nk])?
            } else {
                g.reshape(z, &[1, nk])?
            };
            let z = g.add_scalar(z, NORM_EPS);
            g.div(overlap, z)
        }
    }
}

fn logits_rows(g: &mut Graph, fq: &PatchSet, keys: &KeyRows, cfg: &MppaConfig) -> Result<Var> {
    let c = correlation_rows(g, fq, keys)?;
    let s = saliency_rows(g, fq, keys, cfg.saliency_norm)?;
    let attn = g.mul(c, s)?;
    if cfg.scaled {
        let d = fq.geometry.channels * fq.geometry.area();
        Ok(g.scale(attn, 1.0 / (d as f64).sqrt()))
    } else {
        Ok(attn)
    }
}

/// Pruned correlation: masked inner product of query and aligned key patches.
pub fn pruned_correlation(g: &mut Graph, fq: &PatchSet, fk: &AlignedSet) -> Result<Var> {
    check_pair(g, fq, fk)?;
    let keys = KeyRows::all(g, fk)?;
    correlation_rows(g, fq, &keys)
}

/// Fraction of jointly valid pixels per pair.
pub fn saliency(g: &mut Graph, fq: &PatchSet, fk: &AlignedSet, norm: SaliencyNorm) -> Result<Var> {
    check_pair(g, fq, fk)?;
    let keys = KeyRows::all(g, fk)?;
    saliency_rows(g, fq, &keys, norm)
}

/// `Attn = C ⊙ S` (optionally scaled by 1/√d).
pub fn attention_logits(g: &mut Graph, fq: &PatchSet, fk: &AlignedSet, cfg: &MppaConfig) -> Result<Var> {
    check_pair(g, fq, fk)?;
    let keys = KeyRows::all(g, fk)?;
    logits_rows(g, fq, &keys, cfg)
}

/// `out_q = Σ_k α[q,k] · v_{k→q}` for `α[N_q, N_k]`.
pub fn aggregate(g: &mut Graph, alpha: Var, fv: &AlignedSet) -> Result<Var> {
    let (nq, nk) = (fv.queries, fv.keys());
    if g.shape(alpha) != [nq, nk] {
        return Err(shape_err("aggregate", format!("weights {:?} for {nq}×{nk}", g.shape(alpha))));
    }
    let s = g.shape(fv.tokens).to_vec();
    let d: usize = s[1..].iter().product();
    let out = if fv.per_pair {
        let v = g.reshape(fv.tokens, &[nq, nk, d])?;
        let a = g.reshape(alpha, &[nq, 1, nk])?;
        g.matmul(a, v)?
    } else {
        let v = g.reshape(fv.tokens, &[nk, d])?;
        g.matmul(alpha, v)?
    };
    g.reshape(out, &[nq, s[1], s[2], s[3]])
}

/// Column indices of every row's branch keys, flattened, and the row width.
fn branch_columns(layout: &BlockLayout) -> Result<(Vec<usize>, usize)> {
    let n = layout.tokens();
    let width = layout.keys_of(0).len();
    if width == 0 {
        return Err(Error::EmptyKeySet(0));
    }
    let mut cols = Vec::with_capacity(n * width);
    for q in 0..n {
        cols.extend(layout.keys_of(q));
    }
    Ok((cols, width))
}

/// Place `[N, width]` branch values into an `[N, N]` map, zero elsewhere.
fn spread(g: &mut Graph, sub: Var, cols: &[usize], width: usize, n: usize) -> Result<Var> {
    let mut place = vec![n * width; n * n];
    for (i, &k) in cols.iter().enumerate() {
        place[(i / width) * n + k] = i;
    }
    let flat = g.reshape(sub, &[n * width])?;
    let zero = g.constant(Tensor::zeros(&[1]));
    let padded = g.concat(&[flat, zero], 0)?;
    g.gather(padded, Rc::new(place), &[n, n])
}

/// Softmax of `attn[N_q, N_k]` restricted to each row's branch keys; entries
/// outside the branch are exactly zero.
pub fn branch_softmax(g: &mut Graph, attn: Var, layout: &BlockLayout) -> Result<Var> {
    let n = layout.tokens();
    if layout.branch == Branch::Full {
        let s = g.shape(attn);
        if s.len() != 2 {
            return Err(shape_err("branch_softmax", format!("map {s:?} is not a matrix")));
        }
        if s[1] == 0 {
            return Err(Error::EmptyKeySet(0));
        }
        return g.softmax(attn, 1);
    }
    if g.shape(attn) != [n, n] {
        return Err(shape_err("branch_softmax", format!("map {:?} for {n} tokens", g.shape(attn))));
    }
    let (cols, width) = branch_columns(layout)?;
    let pick = cols.iter().enumerate().map(|(i, &k)| (i / width) * n + k).collect();
    let sub = g.gather(attn, Rc::new(pick), &[n, width])?;
    let alpha = g.softmax(sub, 1)?;
    spread(g, alpha, &cols, width, n)
}

/// MPPA over every key of the head.
pub fn mppa(g: &mut Graph, fq: &PatchSet, fk: &AlignedSet, fv: &AlignedSet, cfg: &MppaConfig) -> Result<MppaOutput> {
    mppa_branch(g, fq, fk, fv, cfg, Branch::Full)
}

/// MPPA with the softmax domain restricted to `branch`. Only the branch's
/// pairs are evaluated; the returned maps are `[N, N]` with zeros outside it.
pub fn mppa_branch(
    g: &mut Graph,
    fq: &PatchSet,
    fk: &AlignedSet,
    fv: &AlignedSet,
    cfg: &MppaConfig,
    branch: Branch,
) -> Result<MppaOutput> {
    if fk.keys() == 0 {
        return Err(Error::EmptyKeySet(0));
    }
    if fk.per_pair != fv.per_pair || fk.keys() != fv.keys() {
        return Err(shape_err("mppa", "keys and values must share their pairing"));
    }
    check_pair(g, fq, fk)?;
    let layout = BlockLayout::of(&fq.geometry, branch);
    if branch == Branch::Full {
        let raw = attention_logits(g, fq, fk, cfg)?;
        let scores = branch_softmax(g, raw, &layout)?;
        let output = aggregate(g, scores, fv)?;
        return Ok(MppaOutput {
            output,
            map: AttentionMap { scores, raw, layout },
        });
    }
    let n = layout.tokens();
    if fk.keys() != n {
        return Err(shape_err("mppa", format!("{} keys for a {n}-token layout", fk.keys())));
    }
    let (cols, width) = branch_columns(&layout)?;
    let rows: Rc<Vec<usize>> = Rc::new(if fk.per_pair {
        cols.iter().enumerate().map(|(i, &k)| (i / width) * n + k).collect()
    } else {
        cols.clone()
    });
    let keys = KeyRows::select(g, fk, &rows, width)?;
    let attn = logits_rows(g, fq, &keys, cfg)?;
    let alpha = g.softmax(attn, 1)?;
    let v = flat_rows(g, fv.tokens)?;
    let v = g.gather_rows(v, rows)?;
    let d = g.shape(v)[1];
    let v = g.reshape(v, &[n, width, d])?;
    let a = g.reshape(alpha, &[n, 1, width])?;
    let out = g.matmul(a, v)?;
    let s = g.shape(fv.tokens).to_vec();
    let output = g.reshape(out, &[n, s[1], s[2], s[3]])?;
    let scores = spread(g, alpha, &cols, width, n)?;
    let raw = spread(g, attn, &cols, width, n)?;
    Ok(MppaOutput {
        output,
        map: AttentionMap { scores, raw, layout },
    })
}

/// Plain-tensor copy of an attention map for dumping.
#[derive(Clone, Debug)]
pub struct AttentionDump {
    pub name: String,
    pub scores: Tensor,
    pub raw: Tensor,
    pub layout: BlockLayout,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    name: &'a str,
    shape: [usize; 2],
    frames: usize,
    patches_per_frame: usize,
    branch: Branch,
    scores_file: String,
    raw_file: String,
    /// Per query frame, the `[start, end)` column block of the same frame.
    spatial_blocks: Vec<[usize; 2]>,
}

impl AttentionDump {
    pub fn capture(g: &Graph, name: impl Into<String>, map: &AttentionMap) -> Self {
        Self {
            name: name.into(),
            scores: g.value(map.scores).clone(),
            raw: g.value(map.raw).clone(),
            layout: map.layout,
        }
    }

    /// Write `<name>.dvt`, `<name>.raw.dvt` and a `<name>.json` layout sidecar.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let scores_file = format!("{}.dvt", self.name);
        let raw_file = format!("{}.raw.dvt", self.name);
        self.scores.write_dvt1(fs::File::create(dir.join(&scores_file))?)?;
        self.raw.write_dvt1(fs::File::create(dir.join(&raw_file))?)?;
        let l = self.layout;
        let side = Sidecar {
            name: &self.name,
            shape: [l.tokens(), l.tokens()],
            frames: l.frames,
            patches_per_frame: l.per_frame,
            branch: l.branch,
            scores_file,
            raw_file,
            spatial_blocks: (0..l.frames).map(|m| [m * l.per_frame, (m + 1) * l.per_frame]).collect(),
        };
        fs::write(dir.join(format!("{}.json", self.name)), serde_json::to_string_pretty(&side)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patch::Role;

    fn set(g: &mut Graph, tokens: Tensor, valid: Tensor, frames: usize, n: usize) -> PatchSet {
        let s = tokens.shape().to_vec();
        let geo = PatchGeometry { frames, n, channels: s[1], patch_h: s[2], patch_w: s[3] };
        let t = g.constant(tokens);
        let v = g.constant(valid);
        PatchSet::from_parts(g, t, v, geo, Role::Query).unwrap()
    }

    #[test]
    fn correlation_cases() {
        let mut g = Graph::new();
        let q = set(&mut g, Tensor::ones(&[1, 1, 2, 2]), Tensor::ones(&[1, 1, 2, 2]), 1, 1);
        let k = AlignedSet::shared(&q, 1);
        let c = pruned_correlation(&mut g, &q, &k).unwrap();
        assert_eq!(g.value(c).data(), &[4.0]);

        let q0 = set(&mut g, Tensor::ones(&[1, 1, 2, 2]), Tensor::zeros(&[1, 1, 2, 2]), 1, 1);
        let c = pruned_correlation(&mut g, &q0, &k).unwrap();
        assert_eq!(g.value(c).data(), &[0.0]);

        let mut vq = Tensor::zeros(&[1, 1, 2, 2]);
        vq.set(&[0, 0, 1, 0], 1.0);
        vq.set(&[0, 0, 0, 0], 1.0);
        let mut vk = Tensor::zeros(&[1, 1, 2, 2]);
        vk.set(&[0, 0, 1, 0], 1.0);
        vk.set(&[0, 0, 1, 1], 1.0);
        let qa = set(&mut g, Tensor::full(&[1, 1, 2, 2], 2.0), vq, 1, 1);
        let kb = set(&mut g, Tensor::full(&[1, 1, 2, 2], 3.0), vk, 1, 1);
        let c = pruned_correlation(&mut g, &qa, &AlignedSet::shared(&kb, 1)).unwrap();
        assert_eq!(g.value(c).data(), &[6.0]);
    }

    #[test]
    fn singleton_key_returns_its_value() {
        let mut g = Graph::new();
        let q = set(&mut g, Tensor::rand_uniform(&[1, 2, 2, 2], -1.0, 1.0, 1), Tensor::ones(&[1, 1, 2, 2]), 1, 1);
        let v = set(&mut g, Tensor::rand_uniform(&[1, 2, 2, 2], -1.0, 1.0, 2), Tensor::ones(&[1, 1, 2, 2]), 1, 1);
        let k = AlignedSet::shared(&q, 1);
        let va = AlignedSet::shared(&v, 1);
        let out = mppa(&mut g, &q, &k, &va, &MppaConfig::default()).unwrap();
        assert_eq!(g.value(out.map.scores).data(), &[1.0]);
        assert_eq!(g.value(out.output).data(), g.value(v.tokens).data());
    }

    #[test]
    fn zero_overlap_key_keeps_positive_weight() {
        let mut g = Graph::new();
        let q = set(&mut g, Tensor::full(&[1, 1, 1, 2], 0.5), Tensor::ones(&[1, 1, 1, 2]), 1, 1);
        let ktok = Tensor::new(&[2, 1, 1, 2], vec![1.0, 1.0, 4.0, 4.0]).unwrap();
        let kval = Tensor::new(&[2, 1, 1, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let k = set(&mut g, ktok, kval, 2, 1);
        let ka = AlignedSet { queries: 1, ..AlignedSet::shared(&k, 1) };
        let attn = attention_logits(&mut g, &q, &ka, &MppaConfig::default()).unwrap();
        // C1 = 0.5+0.5 = 1, S1 = 1; key 2 has no valid overlap.
        assert_eq!(g.value(attn).data(), &[1.0, 0.0]);
        let a = g.softmax(attn, 1).unwrap();
        let e = 1f64.exp();
        let want = [e / (e + 1.0), 1.0 / (e + 1.0)];
        for (x, w) in g.value(a).data().iter().zip(want) {
            assert!((x - w).abs() < 1e-15);
        }
    }

    #[test]
    fn saliency_normalisers() {
        let mut g = Graph::new();
        let mut vq = Tensor::ones(&[1, 1, 3, 3]);
        vq.set(&[0, 0, 0, 0], 0.0);
        let q = set(&mut g, Tensor::ones(&[1, 1, 3, 3]), vq, 1, 1);
        let mut vk = Tensor::zeros(&[1, 1, 3, 3]);
        for x in 0..3 {
            vk.set(&[0, 0, 0, x], 1.0);
        }
        let k = set(&mut g, Tensor::ones(&[1, 1, 3, 3]), vk, 1, 1);
        let ka = AlignedSet::shared(&k, 1);
        let area = saliency(&mut g, &q, &ka, SaliencyNorm::Area).unwrap();
        let qn = saliency(&mut g, &q, &ka, SaliencyNorm::Query).unwrap();
        let kn = saliency(&mut g, &q, &ka, SaliencyNorm::Key).unwrap();
        assert!((g.value(area).item() - 2.0 / 9.0).abs() < 1e-15);
        assert!((g.value(qn).item() - 2.0 / 8.0).abs() < 1e-12);
        assert!((g.value(kn).item() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn branch_layout_counts() {
        for (t, np) in [(3, 4), (4, 9), (5, 36)] {
            let s = BlockLayout { frames: t, per_frame: np, branch: Branch::Spatial };
            let tm = BlockLayout { branch: Branch::Temporal, ..s };
            assert_eq!(s.entries() + tm.entries(), (t * np) * (t * np));
        }
    }
}
