//! Reconstruction, hinge and combined losses.

use crate::error::{shape_err, Result};
use crate::model::config::LossWeights;
use crate::numerics::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct Reconstruction {
    pub hole: Var,
    pub valid: Var,
}

/// Mean absolute error over hole elements and over valid elements.
/// `mask` is `[T, 1, H, W]` (1 = hole) and broadcasts over channels; an empty
/// region contributes zero and logs a warning.
pub fn loss_reconstruction(g: &mut Graph, pred: Var, target: Var, mask: Var) -> Result<Reconstruction> {
    let ps = g.shape(pred).to_vec();
    if ps != g.shape(target) {
        return Err(shape_err("loss_reconstruction", format!("{ps:?} vs {:?}", g.shape(target))));
    }
    let ms = g.shape(mask).to_vec();
    if ms.len() != ps.len() || ms[0] != ps[0] || ms[1] != 1 || ms[2..] != ps[2..] {
        return Err(shape_err("loss_reconstruction", format!("mask {ms:?} for {ps:?}")));
    }
    let channels = ps[1] as f64;
    let holes = g.value(mask).sum() * channels;
    let valids = (g.value(mask).numel() as f64) * channels - holes;
    let diff = g.sub(pred, target)?;
    let err = g.abs(diff);
    let one = g.constant(Tensor::scalar(1.0));
    let keep = g.sub(one, mask)?;
    let region = |g: &mut Graph, weight: Var, count: f64, what: &str| -> Result<Var> {
        if count <= 0.0 {
            log::warn!("{what} region is empty; its reconstruction loss is 0");
            return Ok(g.constant(Tensor::scalar(0.0)));
        }
        let e = g.mul(err, weight)?;
        let s = g.sum(e);
        Ok(g.scale(s, 1.0 / count))
    };
    let hole = region(g, mask, holes, "hole")?;
    let valid = region(g, keep, valids, "valid")?;
    Ok(Reconstruction { hole, valid })
}

#[derive(Clone, Copy, Debug)]
pub struct GanLosses {
    /// `mean relu(1 − D_real) + mean relu(1 + D_fake)`.
    pub discriminator: Var,
    /// `−mean D_fake`.
    pub adversarial: Var,
}

pub fn loss_gan(g: &mut Graph, d_real: Var, d_fake: Var) -> GanLosses {
    let r = g.neg(d_real);
    let r = g.add_scalar(r, 1.0);
    let r = g.relu(r);
    let r = g.mean(r);
    let f = g.add_scalar(d_fake, 1.0);
    let f = g.relu(f);
    let f = g.mean(f);
    let discriminator = g.add(r, f).expect("scalars broadcast");
    let m = g.mean(d_fake);
    let adversarial = g.neg(m);
    GanLosses {
        discriminator,
        adversarial,
    }
}

/// `λ_hole·L_hole + λ_valid·L_valid + λ_adv·L_adv`.
pub fn total_loss(g: &mut Graph, hole: Var, valid: Var, adv: Var, w: &LossWeights) -> Result<Var> {
    let a = g.scale(hole, w.hole);
    let b = g.scale(valid, w.valid);
    let c = g.scale(adv, w.adv);
    let ab = g.add(a, b)?;
    g.add(ab, c)
}

/// Plain-number form of [`total_loss`].
pub fn total_loss_value(hole: f64, valid: f64, adv: f64, w: &LossWeights) -> f64 {
    w.hole * hole + w.valid * valid + w.adv * adv
}
