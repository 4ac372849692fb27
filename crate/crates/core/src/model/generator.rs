//! Encoder → transformer blocks → decoder.

use std::collections::BTreeMap;

use crate::depth::{
    align_head, align_tokens, deformation_factor, estimate_theta, estimator_specs, motion_projection_spec,
    AffineParams, DeformationFactor, EstimatorWeights,
};
use crate::error::{shape_err, Result};
use crate::model::config::{GeneratorConfig, LEAKY_SLOPE};
use crate::numerics::{Graph, SampleGrid, Tensor, Var};
use crate::params::{Bound, Init, ParamSpec};
use crate::patch::{downsample_mask, embed_qkv, extract_patch_channels, QkvWeights, Role};
use crate::sta::{sta_forward, sta_specs, HeadInputs, StaOutput, StaWeights};

/// Power-iteration vectors carried between forward passes, keyed by weight name.
#[derive(Clone, Debug, Default)]
pub struct SpectralState {
    pub u: BTreeMap<String, Vec<f64>>,
    pub iters: usize,
}

impl SpectralState {
    pub fn new(iters: usize) -> Self {
        Self {
            u: BTreeMap::new(),
            iters: iters.max(1),
        }
    }
}

/// Bind a weight, spectral-normalising it when `sn` is given.
pub(crate) fn bind_weight(
    g: &mut Graph,
    params: &mut Bound<'_>,
    name: &str,
    sn: Option<&mut SpectralState>,
) -> Result<Var> {
    let w = params.var(g, name)?;
    match sn {
        None => Ok(w),
        Some(state) => {
            let (out, info) = g.spectral_norm(w, state.iters, state.u.get(name).map(Vec::as_slice))?;
            state.u.insert(name.to_string(), info.u);
            Ok(out)
        }
    }
}

fn conv_spec(name: &str, c_out: usize, c_in: usize, k: usize) -> [ParamSpec; 2] {
    [
        ParamSpec::new(format!("{name}.w"), &[c_out, c_in, k, k], Init::Uniform { fan_in: c_in * k * k, gain: 1.0 }),
        ParamSpec::new(format!("{name}.b"), &[c_out], Init::Zeros),
    ]
}

/// Every generator parameter, in initialisation order.
pub fn generator_specs(cfg: &GeneratorConfig) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    let mut c_prev = 4;
    for (i, &c) in cfg.encoder_channels.iter().enumerate() {
        out.extend(conv_spec(&format!("enc{i}"), c, c_prev, 3));
        c_prev = c;
    }
    let c = cfg.channels();
    for b in 0..cfg.blocks {
        let p = format!("block{b}");
        for r in ["q", "k", "v"] {
            out.extend(conv_spec(&format!("{p}.{r}"), c, c, 1));
        }
        out.extend(estimator_specs(&format!("{p}.est"), c, cfg.depth.estimator_input));
        out.push(motion_projection_spec(&format!("{p}.motion"), cfg.depth.motion_dim));
        out.extend(sta_specs(&format!("{p}.sta"), c, cfg.depth.motion_dim, cfg.gate_hidden));
        out.extend(conv_spec(&format!("{p}.ffn"), c, c, 3));
    }
    let mut c_prev = c;
    for (i, &d) in cfg.decoder_channels.iter().chain(std::iter::once(&3)).enumerate() {
        out.extend(conv_spec(&format!("dec{i}"), d, c_prev, 3));
        c_prev = d;
    }
    out
}

pub fn generator_param_count(cfg: &GeneratorConfig) -> usize {
    generator_specs(cfg).iter().map(ParamSpec::numel).sum()
}

/// Intermediate values of one transformer block.
#[derive(Clone, Debug)]
pub struct BlockTrace {
    pub theta: AffineParams,
    pub motion: DeformationFactor,
    pub heads: Vec<HeadInputs>,
    pub sta: StaOutput,
}

#[derive(Clone, Debug)]
pub struct GeneratorOutput {
    /// Decoder output rescaled to [0, 1], `[T, 3, H, W]`.
    pub raw: Var,
    /// `M·raw + (1 − M)·X`.
    pub composite: Var,
    /// Encoder features `[T, C, H/4, W/4]`.
    pub features: Var,
    pub blocks: Vec<BlockTrace>,
}

struct Ctx<'p, 's, 'a> {
    params: &'p mut Bound<'a>,
    sn: Option<&'s mut SpectralState>,
}

impl Ctx<'_, '_, '_> {
    fn conv(&mut self, g: &mut Graph, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = bind_weight(g, self.params, &format!("{name}.w"), self.sn.as_deref_mut())?;
        let b = self.params.var(g, &format!("{name}.b"))?;
        g.conv2d(x, w, Some(b), stride, pad)
    }

    fn conv_act(&mut self, g: &mut Graph, name: &str, x: Var, stride: usize) -> Result<Var> {
        let y = self.conv(g, name, x, stride, 1)?;
        Ok(g.leaky_relu(y, LEAKY_SLOPE))
    }
}

fn check_clip(g: &Graph, cfg: &GeneratorConfig, frames: Var, masks: Var) -> Result<usize> {
    let fs = g.shape(frames);
    let ms = g.shape(masks);
    if fs.len() != 4 || fs[1] != 3 || fs[2] != cfg.height || fs[3] != cfg.width {
        return Err(shape_err(
            "generate",
            format!("frames {fs:?}, expected [T, 3, {}, {}]", cfg.height, cfg.width),
        ));
    }
    if ms != [fs[0], 1, fs[2], fs[3]] {
        return Err(shape_err("generate", format!("masks {ms:?} vs frames {fs:?}")));
    }
    Ok(fs[0])
}

/// Masked frames plus the mask channel through the strided encoder.
pub fn encode(
    g: &mut Graph,
    params: &mut Bound<'_>,
    cfg: &GeneratorConfig,
    frames: Var,
    masks: Var,
    sn: Option<&mut SpectralState>,
) -> Result<Var> {
    cfg.validate()?;
    check_clip(g, cfg, frames, masks)?;
    let mut ctx = Ctx { params, sn };
    encode_inner(g, &mut ctx, frames, masks)
}

fn encode_inner(g: &mut Graph, ctx: &mut Ctx<'_, '_, '_>, frames: Var, masks: Var) -> Result<Var> {
    let one = g.constant(Tensor::scalar(1.0));
    let keep = g.sub(one, masks)?;
    let visible = g.mul(frames, keep)?;
    let mut x = g.concat(&[visible, masks], 1)?;
    for (i, stride) in [2, 1, 2, 1].into_iter().enumerate() {
        x = ctx.conv_act(g, &format!("enc{i}"), x, stride)?;
    }
    Ok(x)
}

fn transformer_block(
    g: &mut Graph,
    ctx: &mut Ctx<'_, '_, '_>,
    cfg: &GeneratorConfig,
    prefix: &str,
    x: Var,
    mask_f: Var,
) -> Result<(Var, BlockTrace)> {
    let c = cfg.channels();
    let qkv = QkvWeights {
        wq: bind_weight(g, ctx.params, &format!("{prefix}.q.w"), ctx.sn.as_deref_mut())?,
        bq: ctx.params.var(g, &format!("{prefix}.q.b"))?,
        wk: bind_weight(g, ctx.params, &format!("{prefix}.k.w"), ctx.sn.as_deref_mut())?,
        bk: ctx.params.var(g, &format!("{prefix}.k.b"))?,
        wv: bind_weight(g, ctx.params, &format!("{prefix}.v.w"), ctx.sn.as_deref_mut())?,
        bv: ctx.params.var(g, &format!("{prefix}.v.b"))?,
    };
    let (q, k, v) = embed_qkv(g, x, &qkv)?;

    let n_c = cfg.heads.coarsest();
    let qc = extract_patch_channels(g, q, mask_f, n_c, 0..c, Role::Query)?;
    let kc = extract_patch_channels(g, k, mask_f, n_c, 0..c, Role::Key)?;
    let est = {
        let est_prefix = format!("{prefix}.est");
        let mut w = EstimatorWeights::bind(g, ctx.params, &est_prefix, cfg.depth.estimator_input)?;
        if let Some(sn) = ctx.sn.as_deref_mut() {
            w.conv1_w = bind_weight(g, ctx.params, &format!("{est_prefix}.conv1.w"), Some(sn))?;
            w.conv2_w = bind_weight(g, ctx.params, &format!("{est_prefix}.conv2.w"), Some(sn))?;
        }
        w
    };
    let theta = estimate_theta(g, &qc, &kc, &est)?;
    let proj = ctx.params.var(g, &format!("{prefix}.motion"))?;
    let motion = deformation_factor(g, &theta, proj)?;

    let mut heads = Vec::with_capacity(cfg.heads.heads());
    for (range, &n) in cfg.heads.channel_ranges(c)?.into_iter().zip(&cfg.heads.patch_grids) {
        let hq = extract_patch_channels(g, q, mask_f, n, range.clone(), Role::Query)?;
        let hk = extract_patch_channels(g, k, mask_f, n, range.clone(), Role::Key)?;
        let hv = extract_patch_channels(g, v, mask_f, n, range, Role::Value)?;
        let alignment = align_head(g, &theta, &qc.geometry, &hq.geometry)?;
        let (ka, va) = align_tokens(g, &hk, &hv, hq.geometry.tokens(), &alignment)?;
        heads.push(HeadInputs {
            query: hq,
            key: ka,
            value: va,
        });
    }
    let sw = StaWeights::bind(g, ctx.params, &format!("{prefix}.sta"))?;
    let sta = sta_forward(g, &heads, motion.theta_prime, &sw, &cfg.mppa)?;
    let x = g.add(x, sta.fused)?;
    let ff = ctx.conv_act(g, &format!("{prefix}.ffn"), x, 1)?;
    let x = g.add(x, ff)?;
    Ok((
        x,
        BlockTrace {
            theta,
            motion,
            heads,
            sta,
        },
    ))
}

fn upsample2(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let grid = SampleGrid::identity(2 * s[2], 2 * s[3]);
    let grid = grid.tensor().reshape(&[1, 2 * s[2], 2 * s[3], 2])?;
    let grid = g.constant(grid);
    g.grid_sample(x, grid)
}

/// Complete every frame of a clip. `frames` are `[T, 3, H, W]` in [0, 1];
/// `masks` are `[T, 1, H, W]` with 1 marking holes.
pub fn generate(
    g: &mut Graph,
    params: &mut Bound<'_>,
    cfg: &GeneratorConfig,
    frames: Var,
    masks: Var,
    sn: Option<&mut SpectralState>,
) -> Result<GeneratorOutput> {
    cfg.validate()?;
    check_clip(g, cfg, frames, masks)?;
    let mut ctx = Ctx { params, sn };
    let features = encode_inner(g, &mut ctx, frames, masks)?;
    let (fh, fw) = cfg.feature_size();
    let mask_f = g.constant(downsample_mask(g.value(masks), fh, fw)?);

    let mut x = features;
    let mut blocks = Vec::with_capacity(cfg.blocks);
    for b in 0..cfg.blocks {
        let (y, trace) = transformer_block(g, &mut ctx, cfg, &format!("block{b}"), x, mask_f)?;
        x = y;
        blocks.push(trace);
    }

    let x = upsample2(g, x)?;
    let x = ctx.conv_act(g, "dec0", x, 1)?;
    let x = ctx.conv_act(g, "dec1", x, 1)?;
    let x = upsample2(g, x)?;
    let x = ctx.conv_act(g, "dec2", x, 1)?;
    let y = ctx.conv(g, "dec3", x, 1, 1)?;
    let y = g.tanh(y);
    let y = g.add_scalar(y, 1.0);
    let raw = g.scale(y, 0.5);

    let one = g.constant(Tensor::scalar(1.0));
    let keep = g.sub(one, masks)?;
    let fill = g.mul(raw, masks)?;
    let kept = g.mul(frames, keep)?;
    let composite = g.add(fill, kept)?;
    Ok(GeneratorOutput {
        raw,
        composite,
        features,
        blocks,
    })
}
