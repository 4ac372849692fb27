//! Deterministic toy trainer.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::config::{AdamConfig, DiscriminatorConfig, GeneratorConfig, LossWeights};
use crate::model::discriminator::{discriminate, discriminator_specs};
use crate::model::generator::{generate, generator_specs, SpectralState};
use crate::model::loss::{loss_gan, loss_reconstruction, total_loss};
use crate::model::optim::Adam;
use crate::numerics::{Graph, Tensor};
use crate::params::{init_specs, Bound, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iters: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iters: 500,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

/// One row of the loss trace. Row `i` holds the losses evaluated with the
/// parameters after `i` updates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub l_hole: f64,
    pub l_valid: f64,
    pub l_adv: f64,
    pub l_d: f64,
    pub total: f64,
}

pub const TRACE_HEADER: &str = "iter,L_hole,L_valid,L_adv,L_D,total";

pub fn write_trace_csv(rows: &[TraceRow], mut w: impl Write) -> Result<()> {
    writeln!(w, "{TRACE_HEADER}")?;
    for r in rows {
        writeln!(w, "{},{:e},{:e},{:e},{:e},{:e}", r.iter, r.l_hole, r.l_valid, r.l_adv, r.l_d, r.total)?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub trace: Vec<TraceRow>,
    pub generator: ParamStore,
    pub discriminator: Option<ParamStore>,
}

pub fn init_generator(cfg: &GeneratorConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    init_specs(&mut store, &generator_specs(cfg), &mut ChaCha8Rng::seed_from_u64(seed))?;
    Ok(store)
}

pub fn init_discriminator(cfg: &DiscriminatorConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    init_specs(&mut store, &discriminator_specs(cfg), &mut ChaCha8Rng::seed_from_u64(seed))?;
    Ok(store)
}

struct Trainer<'c> {
    gcfg: &'c GeneratorConfig,
    dcfg: &'c DiscriminatorConfig,
    w: LossWeights,
    frames: &'c Tensor,
    masks: &'c Tensor,
    gsn: Option<SpectralState>,
    dsn: SpectralState,
}

impl Trainer<'_> {
    /// `L_D` on real vs detached fake, followed by an update when `opt` is given.
    fn d_step(&mut self, gp: &ParamStore, dp: &mut ParamStore, opt: Option<&mut Adam>) -> Result<f64> {
        let fake = {
            let mut g = Graph::new();
            let mut b = Bound::new(gp, false);
            let x = g.constant(self.frames.clone());
            let m = g.constant(self.masks.clone());
            let out = generate(&mut g, &mut b, self.gcfg, x, m, self.gsn.as_mut())?;
            g.value(out.composite).clone()
        };
        let mut g = Graph::new();
        let mut b = Bound::new(dp, true);
        let real = g.constant(self.frames.clone());
        let fake = g.constant(fake);
        let dr = discriminate(&mut g, &mut b, self.dcfg, real, &mut self.dsn)?;
        let df = discriminate(&mut g, &mut b, self.dcfg, fake, &mut self.dsn)?;
        let gan = loss_gan(&mut g, dr, df);
        let l_d = g.value(gan.discriminator).item();
        if let Some(opt) = opt {
            let grads = g.backward(gan.discriminator)?;
            let grads = b.grads(&grads);
            drop(b);
            opt.step(dp, &grads)?;
        }
        Ok(l_d)
    }

    /// Generator losses with the current parameters, plus their gradients.
    fn g_losses(&mut self, gp: &ParamStore, dp: Option<&ParamStore>) -> Result<(TraceRow, std::collections::BTreeMap<String, Tensor>)> {
        let mut g = Graph::new();
        let mut b = Bound::new(gp, true);
        let x = g.constant(self.frames.clone());
        let m = g.constant(self.masks.clone());
        let out = generate(&mut g, &mut b, self.gcfg, x, m, self.gsn.as_mut())?;
        let rec = loss_reconstruction(&mut g, out.raw, x, m)?;
        let adv = match dp {
            Some(dp) => {
                let mut db = Bound::new(dp, false);
                let df = discriminate(&mut g, &mut db, self.dcfg, out.composite, &mut self.dsn)?;
                let real = g.constant(Tensor::scalar(0.0));
                loss_gan(&mut g, real, df).adversarial
            }
            None => g.constant(Tensor::scalar(0.0)),
        };
        let total = total_loss(&mut g, rec.hole, rec.valid, adv, &self.w)?;
        let row = TraceRow {
            iter: 0,
            l_hole: g.value(rec.hole).item(),
            l_valid: g.value(rec.valid).item(),
            l_adv: g.value(adv).item(),
            l_d: 0.0,
            total: g.value(total).item(),
        };
        let grads = g.backward(total)?;
        Ok((row, b.grads(&grads)))
    }
}

/// Overfit the generator on one clip. Holes are `masks == 1`; the loss is
/// taken against `frames`, which double as ground truth. Returns `iters + 1`
/// trace rows.
pub fn train_toy(
    frames: &Tensor,
    masks: &Tensor,
    gcfg: &GeneratorConfig,
    dcfg: &DiscriminatorConfig,
    weights: &LossWeights,
    tcfg: &TrainConfig,
) -> Result<TrainOutcome> {
    gcfg.validate()?;
    weights.validate()?;
    let t = frames.shape().first().copied().unwrap_or(0);
    gcfg.check_toy(t)?;
    let adversarial = weights.adv > 0.0;
    if adversarial {
        dcfg.validate()?;
    }
    let mut gp = init_generator(gcfg, tcfg.seed)?;
    let mut dp = if adversarial {
        Some(init_discriminator(dcfg, tcfg.seed.wrapping_add(1))?)
    } else {
        None
    };
    let mut gopt = Adam::new(tcfg.adam);
    let mut dopt = Adam::new(tcfg.adam);
    let mut tr = Trainer {
        gcfg,
        dcfg,
        w: *weights,
        frames,
        masks,
        gsn: gcfg.spectral_norm.then(|| SpectralState::new(1)),
        dsn: SpectralState::new(dcfg.power_iters),
    };
    let mut trace = Vec::with_capacity(tcfg.iters + 1);
    for iter in 0..=tcfg.iters {
        let l_d = match dp.as_mut() {
            Some(dp) => tr.d_step(&gp, dp, (iter < tcfg.iters).then_some(&mut dopt))?,
            None => 0.0,
        };
        let (mut row, grads) = tr.g_losses(&gp, dp.as_ref())?;
        row.iter = iter;
        row.l_d = l_d;
        if ![row.l_hole, row.l_valid, row.l_adv, row.l_d, row.total].iter().all(|v| v.is_finite())
            || grads.values().any(|g| !g.all_finite())
        {
            return Err(Error::Diverged { iter });
        }
        log::debug!("iter {iter}: L_hole {:.6} total {:.6}", row.l_hole, row.total);
        trace.push(row);
        if iter < tcfg.iters {
            gopt.step(&mut gp, &grads)?;
        }
    }
    Ok(TrainOutcome {
        trace,
        generator: gp,
        discriminator: dp,
    })
}
