//! Deformed patch alignment: a small CNN predicts one affine transform per
//! (query patch, key patch) pair, key/value tokens and their validity are warped
//! onto the query, and the transforms are pooled into a motion descriptor.
//!
//! Transforms are estimated once, at the coarsest head, and carried to finer
//! heads by re-expressing the coarse map in each fine patch's local coordinates.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::kernels::normalize;
use crate::numerics::{Graph, Tensor, Var};
use crate::params::{init_specs, Bound, Init, ParamSpec, ParamStore};
use crate::patch::{PatchGeometry, PatchSet, Role};

/// `[a, b, tx, c, d, ty]` of the identity transform.
pub const IDENTITY_AFFINE: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

/// Width of the pooled raw deviation vector (mean and mean-absolute, 6 each).
pub const RAW_DEVIATION_DIM: usize = 12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorInput {
    /// Query and key tokens stacked channel-wise (`2c` input channels).
    #[default]
    Concat,
    /// Elementwise query·key correlation (`c` input channels).
    Correlation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DepthConfig {
    pub estimator_input: EstimatorInput,
    /// Width of the projected deformation factor.
    pub motion_dim: usize,
}

impl Default for DepthConfig {
    fn default() -> Self {
        Self {
            estimator_input: EstimatorInput::Concat,
            motion_dim: 6,
        }
    }
}

/// One 2×3 transform per pair; row `q * keys + k` pairs query `q` with key `k`.
#[derive(Clone, Copy, Debug)]
pub struct AffineParams {
    pub theta: Var,
    pub queries: usize,
    pub keys: usize,
}

impl AffineParams {
    pub fn pairs(&self) -> usize {
        self.queries * self.keys
    }

    pub fn pairing(&self, row: usize) -> (usize, usize) {
        (row / self.keys, row % self.keys)
    }

    /// Constant identity transforms for every pair.
    pub fn identity(g: &mut Graph, queries: usize, keys: usize) -> Self {
        let p = queries * keys;
        let theta = g.constant(Tensor::from_fn(&[p, 2, 3], |i| IDENTITY_AFFINE[i[1] * 3 + i[2]]));
        Self { theta, queries, keys }
    }

    /// Wrap an explicit `[P, 2, 3]` tensor.
    pub fn from_var(g: &Graph, theta: Var, queries: usize, keys: usize) -> Result<Self> {
        if g.shape(theta) != [queries * keys, 2, 3] {
            return Err(shape_err(
                "AffineParams",
                format!("theta {:?} for {queries}×{keys} pairs", g.shape(theta)),
            ));
        }
        Ok(Self { theta, queries, keys })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EstimatorWeights {
    pub conv1_w: Var,
    pub conv1_b: Var,
    pub conv2_w: Var,
    pub conv2_b: Var,
    pub fc_w: Var,
    pub fc_b: Var,
    pub input: EstimatorInput,
}

fn estimator_widths(channels: usize, input: EstimatorInput) -> (usize, usize, usize) {
    let c_in = match input {
        EstimatorInput::Concat => 2 * channels,
        EstimatorInput::Correlation => channels,
    };
    (c_in, channels, (channels / 2).max(1))
}

/// Estimator parameters under `prefix`. The final layer is zero with an
/// identity bias, so a fresh estimator outputs the identity for every input.
pub fn estimator_specs(prefix: &str, channels: usize, input: EstimatorInput) -> Vec<ParamSpec> {
    let (c_in, c1, c2) = estimator_widths(channels, input);
    vec![
        ParamSpec::new(format!("{prefix}.conv1.w"), &[c1, c_in, 3, 3], Init::Uniform { fan_in: c_in * 9, gain: 1.0 }),
        ParamSpec::new(format!("{prefix}.conv1.b"), &[c1], Init::Zeros),
        ParamSpec::new(format!("{prefix}.conv2.w"), &[c2, c1, 3, 3], Init::Uniform { fan_in: c1 * 9, gain: 1.0 }),
        ParamSpec::new(format!("{prefix}.conv2.b"), &[c2], Init::Zeros),
        ParamSpec::new(format!("{prefix}.fc.w"), &[c2, 6], Init::Zeros),
        ParamSpec::new(format!("{prefix}.fc.b"), &[6], Init::Values(IDENTITY_AFFINE.to_vec())),
    ]
}

pub fn init_estimator(store: &mut ParamStore, prefix: &str, channels: usize, input: EstimatorInput, rng: &mut impl Rng) {
    init_specs(store, &estimator_specs(prefix, channels, input), rng).expect("estimator specs are consistent");
}

impl EstimatorWeights {
    pub fn bind(g: &mut Graph, params: &mut Bound<'_>, prefix: &str, input: EstimatorInput) -> Result<Self> {
        Ok(Self {
            conv1_w: params.var(g, &format!("{prefix}.conv1.w"))?,
            conv1_b: params.var(g, &format!("{prefix}.conv1.b"))?,
            conv2_w: params.var(g, &format!("{prefix}.conv2.w"))?,
            conv2_b: params.var(g, &format!("{prefix}.conv2.b"))?,
            fc_w: params.var(g, &format!("{prefix}.fc.w"))?,
            fc_b: params.var(g, &format!("{prefix}.fc.b"))?,
            input,
        })
    }
}

/// Rows of `tokens[N, ...]` repeated so that output row `q * nk + k` is row `pick(q, k)`.
fn pair_rows(g: &mut Graph, tokens: Var, nq: usize, nk: usize, pick: impl Fn(usize, usize) -> usize) -> Result<Var> {
    let shape = g.shape(tokens).to_vec();
    let row: usize = shape[1..].iter().product();
    let mut index = Vec::with_capacity(nq * nk * row);
    for q in 0..nq {
        for k in 0..nk {
            let r = pick(q, k);
            index.extend(r * row..(r + 1) * row);
        }
    }
    let mut out = shape;
    out[0] = nq * nk;
    g.gather(tokens, Rc::new(index), &out)
}

/// Predict θ for every (query, key) pair of two patch sets with the same geometry.
pub fn estimate_theta(g: &mut Graph, fq: &PatchSet, fk: &PatchSet, w: &EstimatorWeights) -> Result<AffineParams> {
    if fq.geometry != fk.geometry {
        return Err(shape_err(
            "estimate_theta",
            format!("query {:?} vs key {:?}", fq.geometry, fk.geometry),
        ));
    }
    let geo = fq.geometry;
    let (nq, nk) = (geo.tokens(), geo.tokens());
    let (c_in, _, c2) = estimator_widths(geo.channels, w.input);
    if g.shape(w.conv1_w)[1] != c_in {
        return Err(shape_err(
            "estimate_theta",
            format!("estimator expects {} input channels, tokens give {c_in}", g.shape(w.conv1_w)[1]),
        ));
    }
    let qr = pair_rows(g, fq.tokens, nq, nk, |q, _| q)?;
    let kr = pair_rows(g, fk.tokens, nq, nk, |_, k| k)?;
    let x = match w.input {
        EstimatorInput::Concat => g.concat(&[qr, kr], 1)?,
        EstimatorInput::Correlation => g.mul(qr, kr)?,
    };
    let h = g.conv2d(x, w.conv1_w, Some(w.conv1_b), 2, 1)?;
    let h = g.relu(h);
    let h = g.conv2d(h, w.conv2_w, Some(w.conv2_b), 2, 1)?;
    let h = g.relu(h);
    let s = g.shape(h).to_vec();
    let p = nq * nk;
    let h = g.reshape(h, &[p, c2, s[2] * s[3]])?;
    let h = g.sum_axis(h, 2)?;
    let h = g.scale(h, 1.0 / (s[2] * s[3]) as f64);
    let h = g.reshape(h, &[p, c2])?;
    let t = g.matmul(h, w.fc_w)?;
    let t = g.add(t, w.fc_b)?;
    let theta = g.reshape(t, &[p, 2, 3])?;
    Ok(AffineParams {
        theta,
        queries: nq,
        keys: nk,
    })
}

/// How a head's keys relate to its queries.
#[derive(Clone, Copy, Debug)]
pub enum Alignment {
    /// Keys are used as-is for every query (identity warp).
    Shared,
    PerPair(AffineParams),
}

/// Scale and offset of one fine axis inside its coarse parent patch.
struct AxisMap {
    /// `None` when the fine patch is a single pixel wide on this axis.
    scale: Option<f64>,
    parent: Vec<usize>,
    offset: Vec<f64>,
}

fn axis_map(n_f: usize, len_f: usize, n_c: usize, len_c: usize) -> AxisMap {
    let scale = (len_f > 1).then(|| (len_f - 1) as f64 / (len_c - 1) as f64);
    let mut parent = Vec::with_capacity(n_f);
    let mut offset = Vec::with_capacity(n_f);
    for i in 0..n_f {
        let centre = (i * len_f) as f64 + (len_f - 1) as f64 / 2.0;
        let p = ((centre / len_c as f64).floor() as usize).min(n_c - 1);
        parent.push(p);
        offset.push(normalize(centre - (p * len_c) as f64, len_c));
    }
    AxisMap { scale, parent, offset }
}

/// Carry coarse-head transforms to a finer head of the same feature map.
///
/// Each fine pair inherits the θ of its parents' pair (parents contain the
/// patch centres) conjugated by the query's local frame, so the coarse identity
/// stays the identity. An axis along which fine patches are one pixel wide has
/// nothing to warp and gets the identity row; fully one-pixel patches share
/// their keys unwarped.
pub fn align_head(g: &mut Graph, coarse: &AffineParams, cg: &PatchGeometry, fg: &PatchGeometry) -> Result<Alignment> {
    if cg.frames != fg.frames || cg.n * cg.patch_h != fg.n * fg.patch_h || cg.n * cg.patch_w != fg.n * fg.patch_w {
        return Err(shape_err("align_head", format!("coarse {cg:?} vs fine {fg:?}")));
    }
    if fg.n < cg.n {
        return Err(Error::Invalid(format!("head grid {} is coarser than the estimation grid {}", fg.n, cg.n)));
    }
    if coarse.queries != cg.tokens() || coarse.keys != cg.tokens() {
        return Err(shape_err("align_head", "theta does not match the coarse geometry"));
    }
    if fg.n == cg.n {
        return Ok(Alignment::PerPair(*coarse));
    }
    if fg.patch_h == 1 && fg.patch_w == 1 {
        return Ok(Alignment::Shared);
    }
    let xm = axis_map(fg.n, fg.patch_w, cg.n, cg.patch_w);
    let ym = axis_map(fg.n, fg.patch_h, cg.n, cg.patch_h);
    let nf = fg.tokens();
    let parent_of = |tok: usize| {
        let (i, j) = fg.cell_of(tok);
        fg.frame_of(tok) * cg.per_frame() + ym.parent[i] * cg.n + xm.parent[j]
    };
    let nkc = cg.tokens();
    let mut index = Vec::with_capacity(nf * nf * 6);
    for q in 0..nf {
        let pq = parent_of(q);
        for k in 0..nf {
            let row = (pq * nkc + parent_of(k)) * 6;
            index.extend(row..row + 6);
        }
    }
    let gathered = g.gather(coarse.theta, Rc::new(index), &[nf, nf, 6])?;

    let mut lin = Tensor::zeros(&[nf, 6, 6]);
    let mut bias = Tensor::zeros(&[nf, 1, 6]);
    for q in 0..nf {
        let (i, j) = fg.cell_of(q);
        let (ox, oy) = (xm.offset[j], ym.offset[i]);
        match (xm.scale, ym.scale) {
            (Some(sx), sy) => {
                lin.set(&[q, 0, 0], 1.0);
                lin.set(&[q, 1, 1], sy.unwrap_or(0.0) / sx);
                lin.set(&[q, 0, 2], ox / sx);
                lin.set(&[q, 1, 2], oy / sx);
                lin.set(&[q, 2, 2], 1.0 / sx);
                bias.set(&[q, 0, 2], -ox / sx);
            }
            (None, _) => bias.set(&[q, 0, 0], 1.0),
        }
        match (ym.scale, xm.scale) {
            (Some(sy), sx) => {
                lin.set(&[q, 3, 3], sx.unwrap_or(0.0) / sy);
                lin.set(&[q, 4, 4], 1.0);
                lin.set(&[q, 3, 5], ox / sy);
                lin.set(&[q, 4, 5], oy / sy);
                lin.set(&[q, 5, 5], 1.0 / sy);
                bias.set(&[q, 0, 5], -oy / sy);
            }
            (None, _) => bias.set(&[q, 0, 4], 1.0),
        }
    }
    let lin = g.constant(lin);
    let bias = g.constant(bias);
    let t = g.matmul(gathered, lin)?;
    let t = g.add(t, bias)?;
    let theta = g.reshape(t, &[nf * nf, 2, 3])?;
    Ok(Alignment::PerPair(AffineParams {
        theta,
        queries: nf,
        keys: nf,
    }))
}

/// Key or value tokens aligned to the queries.
///
/// Per-pair sets hold `[queries·keys, c, h_p, w_p]` with row `q * keys + k`;
/// shared sets hold the `[keys, c, h_p, w_p]` originals.
#[derive(Clone, Copy, Debug)]
pub struct AlignedSet {
    pub tokens: Var,
    pub valid: Var,
    pub geometry: PatchGeometry,
    pub role: Role,
    pub queries: usize,
    pub per_pair: bool,
}

impl AlignedSet {
    pub fn shared(p: &PatchSet, queries: usize) -> Self {
        Self {
            tokens: p.tokens,
            valid: p.valid,
            geometry: p.geometry,
            role: p.role,
            queries,
            per_pair: false,
        }
    }

    pub fn keys(&self) -> usize {
        self.geometry.tokens()
    }
}

/// Warp keys, values and key validity onto each query with the pair's θ.
/// Validity stays soft; samples falling outside the key patch read zero.
pub fn warp_tokens(g: &mut Graph, fk: &PatchSet, fv: &PatchSet, theta: &AffineParams) -> Result<(AlignedSet, AlignedSet)> {
    let geo = fk.geometry;
    if fv.geometry.tokens() != geo.tokens() || fv.geometry.patch_h != geo.patch_h || fv.geometry.patch_w != geo.patch_w {
        return Err(shape_err("warp_tokens", format!("keys {geo:?} vs values {:?}", fv.geometry)));
    }
    if theta.keys != geo.tokens() {
        return Err(shape_err(
            "warp_tokens",
            format!("theta pairs {} keys, patch set has {}", theta.keys, geo.tokens()),
        ));
    }
    let grid = g.affine_grid(theta.theta, geo.patch_h, geo.patch_w)?;
    let nk = theta.keys;
    let src_of = Rc::new((0..theta.pairs()).map(|p| p % nk).collect::<Vec<_>>());
    let kt = g.grid_sample_indexed(fk.tokens, grid, src_of.clone())?;
    let vt = g.grid_sample_indexed(fv.tokens, grid, src_of.clone())?;
    let valid = g.grid_sample_indexed(fk.valid, grid, src_of)?;
    let mk = AlignedSet {
        tokens: kt,
        valid,
        geometry: geo,
        role: Role::Key,
        queries: theta.queries,
        per_pair: true,
    };
    let mv = AlignedSet {
        tokens: vt,
        geometry: fv.geometry,
        role: Role::Value,
        ..mk
    };
    Ok((mk, mv))
}

/// Align keys and values for one head according to `alignment`.
pub fn align_tokens(
    g: &mut Graph,
    fk: &PatchSet,
    fv: &PatchSet,
    queries: usize,
    alignment: &Alignment,
) -> Result<(AlignedSet, AlignedSet)> {
    match alignment {
        Alignment::Shared => Ok((AlignedSet::shared(fk, queries), AlignedSet::shared(fv, queries))),
        Alignment::PerPair(theta) => warp_tokens(g, fk, fv, theta),
    }
}

/// Per-video motion descriptor pooled from all estimated transforms.
#[derive(Clone, Copy, Debug)]
pub struct DeformationFactor {
    /// `[1, 12]`: mean of θ − I followed by mean of |θ − I|.
    pub raw: Var,
    /// `[1, d_m]` learned projection of `raw`.
    pub theta_prime: Var,
}

/// `[1, 12]` pooled deviation of θ from the identity.
pub fn pooled_deviation(g: &mut Graph, theta: &AffineParams) -> Result<Var> {
    let p = theta.pairs();
    if p == 0 {
        return Err(Error::Invalid("deformation factor needs at least one pair".into()));
    }
    let flat = g.reshape(theta.theta, &[p, 6])?;
    let eye = g.constant(Tensor::new(&[6], IDENTITY_AFFINE.to_vec())?);
    let dev = g.sub(flat, eye)?;
    let mean = g.sum_axis(dev, 0)?;
    let mean = g.scale(mean, 1.0 / p as f64);
    let ad = g.abs(dev);
    let ad = g.sum_axis(ad, 0)?;
    let ad = g.scale(ad, 1.0 / p as f64);
    g.concat(&[mean, ad], 1)
}

/// Pool θ and project with `proj[12, d_m]` (no bias, so identity motion maps to zero).
pub fn deformation_factor(g: &mut Graph, theta: &AffineParams, proj: Var) -> Result<DeformationFactor> {
    if g.shape(proj).len() != 2 || g.shape(proj)[0] != RAW_DEVIATION_DIM {
        return Err(shape_err("deformation_factor", format!("projection {:?}", g.shape(proj))));
    }
    let raw = pooled_deviation(g, theta)?;
    let theta_prime = g.matmul(raw, proj)?;
    Ok(DeformationFactor { raw, theta_prime })
}

pub fn motion_projection_spec(name: &str, dim: usize) -> ParamSpec {
    ParamSpec::new(name, &[RAW_DEVIATION_DIM, dim], Init::Uniform { fan_in: RAW_DEVIATION_DIM, gain: 1.0 })
}
