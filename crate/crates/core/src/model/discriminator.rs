//! Temporal PatchGAN: six spectrally normalised 3-D convolutions scoring
//! spatio-temporal patches of a clip.

use crate::error::{shape_err, Error, Result};
use crate::model::config::{DiscriminatorConfig, LEAKY_SLOPE};
use crate::model::generator::{bind_weight, SpectralState};
use crate::numerics::{Graph, Var};
use crate::params::{Bound, Init, ParamSpec};

pub fn discriminator_specs(cfg: &DiscriminatorConfig) -> Vec<ParamSpec> {
    let taps: usize = cfg.kernel.iter().product();
    let mut out = Vec::new();
    let mut c_prev = 3;
    for (i, &c) in cfg.channels.iter().enumerate() {
        let mut shape = vec![c, c_prev];
        shape.extend(cfg.kernel);
        out.push(ParamSpec::new(format!("disc{i}.w"), &shape, Init::Uniform { fan_in: c_prev * taps, gain: 1.0 }));
        out.push(ParamSpec::new(format!("disc{i}.b"), &[c], Init::Zeros));
        c_prev = c;
    }
    out
}

/// Score map `[1, C, T', H', W']` of a `[T, 3, H, W]` clip; no output nonlinearity.
pub fn discriminate(
    g: &mut Graph,
    params: &mut Bound<'_>,
    cfg: &DiscriminatorConfig,
    video: Var,
    sn: &mut SpectralState,
) -> Result<Var> {
    cfg.validate()?;
    let s = g.shape(video).to_vec();
    if s.len() != 4 || s[1] != 3 {
        return Err(shape_err("discriminate", format!("video {s:?}, expected [T, 3, H, W]")));
    }
    if s[0] < cfg.kernel[0] {
        return Err(Error::TooShort(format!(
            "discriminator needs at least {} frames, got {}",
            cfg.kernel[0], s[0]
        )));
    }
    let v = g.permute(video, &[1, 0, 2, 3])?;
    let mut x = g.reshape(v, &[1, 3, s[0], s[2], s[3]])?;
    let last = cfg.channels.len() - 1;
    for i in 0..cfg.channels.len() {
        let w = bind_weight(g, params, &format!("disc{i}.w"), Some(&mut *sn))?;
        let b = params.var(g, &format!("disc{i}.b"))?;
        x = g.conv3d(x, w, Some(b), cfg.stride, cfg.padding)?;
        if i != last {
            x = g.leaky_relu(x, LEAKY_SLOPE);
        }
    }
    Ok(x)
}
