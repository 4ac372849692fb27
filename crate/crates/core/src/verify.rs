//! Finite-difference gradient suite over every differentiable primitive and
//! the composed alignment → attention → fusion → loss pipeline.

use std::rc::Rc;

use serde::Serialize;

use crate::depth::{deformation_factor, estimate_theta, estimator_specs, warp_tokens, EstimatorInput, EstimatorWeights};
use crate::error::Result;
use crate::model::{generate, generator_specs, loss_gan, loss_reconstruction, total_loss, GeneratorConfig, LossWeights};
use crate::mppa::MppaConfig;
use crate::numerics::{GradCheck, Graph, Tensor, Var};
use crate::params::{init_specs, Bound, ParamStore};
use crate::patch::{extract_patches, Role};
use crate::sta::{sta_forward, sta_specs, HeadInputs, StaWeights};

type Loss = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub loss: Loss,
    /// Coordinates sampled per input (all when `None`).
    pub max_coords: Option<usize>,
}

#[derive(Clone, Debug, Serialize)]
pub struct CaseResult {
    pub name: String,
    pub max_rel_error: f64,
    pub coords_checked: usize,
    pub coords_skipped: usize,
    pub passed: bool,
}

fn rand(shape: &[usize], seed: u64) -> Tensor {
    Tensor::rand_uniform(shape, -1.0, 1.0, seed)
}

/// Values bounded away from zero (for kinks and divisors).
fn away(shape: &[usize], seed: u64) -> Tensor {
    rand(shape, seed).map(|v| if v >= 0.0 { 0.2 + v } else { v - 0.2 })
}

/// Weighted sum against fixed random weights, so every output coordinate
/// contributes a distinct gradient.
fn probe(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let w = g.constant(rand(g.shape(y), seed ^ 0x5eed));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn case(name: &'static str, inputs: Vec<Tensor>, loss: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static) -> Case {
    Case {
        name,
        inputs,
        loss: Box::new(loss),
        max_coords: None,
    }
}

fn primitive_cases(seed: u64) -> Vec<Case> {
    let s = seed.wrapping_mul(1000);
    vec![
        case("add", vec![rand(&[2, 3], s + 1), rand(&[1, 3], s + 2)], move |g, v| {
            let y = g.add(v[0], v[1])?;
            probe(g, y, s)
        }),
        case("sub", vec![rand(&[2, 3], s + 3), rand(&[2, 1], s + 4)], move |g, v| {
            let y = g.sub(v[0], v[1])?;
            probe(g, y, s)
        }),
        case("mul", vec![rand(&[2, 3, 2], s + 5), rand(&[3, 1], s + 6)], move |g, v| {
            let y = g.mul(v[0], v[1])?;
            probe(g, y, s)
        }),
        case("div", vec![rand(&[2, 3], s + 7), away(&[2, 3], s + 8)], move |g, v| {
            let y = g.div(v[0], v[1])?;
            probe(g, y, s)
        }),
        case("scale_shift_neg", vec![rand(&[4], s + 9)], move |g, v| {
            let y = g.scale(v[0], 1.7);
            let y = g.add_scalar(y, 0.3);
            let y = g.neg(y);
            probe(g, y, s)
        }),
        case("sum_mean", vec![rand(&[3, 4], s + 10)], move |g, v| {
            let sq = g.mul(v[0], v[0])?;
            let a = g.sum(sq);
            let b = g.mean(v[0]);
            let a = g.scale(a, 0.5);
            g.add(a, b)
        }),
        case("sum_axis", vec![rand(&[2, 3, 4], s + 11)], move |g, v| {
            let y = g.sum_axis(v[0], 1)?;
            probe(g, y, s)
        }),
        case("matmul", vec![rand(&[3, 4], s + 12), rand(&[4, 2], s + 13)], move |g, v| {
            let y = g.matmul(v[0], v[1])?;
            probe(g, y, s)
        }),
        case("matmul_batched", vec![rand(&[2, 3, 4], s + 14), rand(&[2, 4, 2], s + 15)], move |g, v| {
            let y = g.matmul(v[0], v[1])?;
            probe(g, y, s)
        }),
        case("matmul_shared", vec![rand(&[2, 3, 4], s + 16), rand(&[4, 2], s + 17)], move |g, v| {
            let y = g.matmul(v[0], v[1])?;
            probe(g, y, s)
        }),
        case("reshape_permute", vec![rand(&[2, 3, 4], s + 18)], move |g, v| {
            let y = g.permute(v[0], &[2, 0, 1])?;
            let y = g.reshape(y, &[4, 6])?;
            probe(g, y, s)
        }),
        case("gather", vec![rand(&[5], s + 19)], move |g, v| {
            let y = g.gather(v[0], Rc::new(vec![4, 0, 0, 2, 3, 3]), &[2, 3])?;
            probe(g, y, s)
        }),
        case("gather_rows", vec![rand(&[3, 2], s + 20)], move |g, v| {
            let y = g.gather_rows(v[0], Rc::new(vec![2, 0, 2, 1]))?;
            probe(g, y, s)
        }),
        case("concat_slice", vec![rand(&[2, 2], s + 21), rand(&[2, 3], s + 22)], move |g, v| {
            let y = g.concat(&[v[0], v[1]], 1)?;
            let y = g.slice(y, 1, 1..4)?;
            probe(g, y, s)
        }),
        case("tanh_exp", vec![rand(&[5], s + 23)], move |g, v| {
            let a = g.tanh(v[0]);
            let b = g.exp(v[0]);
            let y = g.add(a, b)?;
            probe(g, y, s)
        }),
        case("relu_leaky_abs", vec![away(&[6], s + 24)], move |g, v| {
            let a = g.relu(v[0]);
            let b = g.leaky_relu(v[0], 0.2);
            let c = g.abs(v[0]);
            let y = g.concat(&[a, b, c], 0)?;
            probe(g, y, s)
        }),
        case("softmax", vec![rand(&[3, 4], s + 25)], move |g, v| {
            let y = g.softmax(v[0], 1)?;
            probe(g, y, s)
        }),
        case(
            "conv2d",
            vec![rand(&[2, 2, 5, 5], s + 26), rand(&[3, 2, 3, 3], s + 27), rand(&[3], s + 28)],
            move |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
                probe(g, y, s)
            },
        ),
        case(
            "conv3d",
            vec![rand(&[1, 2, 3, 5, 5], s + 29), rand(&[2, 2, 3, 3, 3], s + 30), rand(&[2], s + 31)],
            move |g, v| {
                let y = g.conv3d(v[0], v[1], Some(v[2]), [1, 2, 2], [1, 1, 1])?;
                probe(g, y, s)
            },
        ),
        case("affine_grid", vec![rand(&[3, 2, 3], s + 32)], move |g, v| {
            let y = g.affine_grid(v[0], 3, 4)?;
            probe(g, y, s)
        }),
        case(
            "grid_sample",
            vec![rand(&[2, 2, 4, 5], s + 33), Tensor::rand_uniform(&[2, 3, 3, 2], -1.2, 1.2, s + 34)],
            move |g, v| {
                let y = g.grid_sample(v[0], v[1])?;
                probe(g, y, s)
            },
        ),
        case(
            "grid_sample_indexed",
            vec![rand(&[2, 1, 4, 4], s + 35), Tensor::rand_uniform(&[3, 3, 3, 2], -1.1, 1.1, s + 36)],
            move |g, v| {
                let y = g.grid_sample_indexed(v[0], v[1], Rc::new(vec![1, 0, 1]))?;
                probe(g, y, s)
            },
        ),
        // The backward pass assumes converged power iteration.
        case("spectral_norm", vec![rand(&[3, 2, 2, 2], s + 37)], move |g, v| {
            let (y, _) = g.spectral_norm(v[0], 2000, None)?;
            probe(g, y, s)
        }),
    ]
}

/// Features → estimated θ → warped keys/values → MPPA → STA → total loss.
fn pipeline_case(seed: u64) -> Case {
    let (t, c, h, w) = (2, 4, 8, 8);
    let mut store = ParamStore::new();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let mut specs = estimator_specs("est", c, EstimatorInput::Concat);
    specs.extend(sta_specs("sta", c, 6, 8));
    specs.push(crate::depth::motion_projection_spec("motion", 6));
    init_specs(&mut store, &specs, &mut rng).expect("specs are consistent");
    let mut mask = Tensor::zeros(&[t, 1, h, w]);
    for y in 2..6 {
        for x in 3..7 {
            mask.set(&[0, 0, y, x], 1.0);
        }
    }
    let target = Tensor::rand_uniform(&[t, c, h, w], 0.0, 1.0, seed + 7);
    let inputs = vec![
        Tensor::rand_uniform(&[t, c, h, w], -0.5, 0.5, seed + 1),
        Tensor::rand_uniform(&[c / 2, 6], -0.3, 0.3, seed + 2),
        Tensor::rand_uniform(&[8, 2], -0.5, 0.5, seed + 3),
    ];
    let loss = move |g: &mut Graph, v: &[Var]| -> Result<Var> {
        let mut b = Bound::new(&store, false);
        b.set("est.fc.w", v[1]);
        b.set("sta.gate.w2", v[2]);
        let m = g.constant(mask.clone());
        let q = extract_patches(g, v[0], m, 2, Role::Query)?;
        let k = extract_patches(g, v[0], m, 2, Role::Key)?;
        let vv = extract_patches(g, v[0], m, 2, Role::Value)?;
        let est = EstimatorWeights::bind(g, &mut b, "est", EstimatorInput::Concat)?;
        let theta = estimate_theta(g, &q, &k, &est)?;
        let (ka, va) = warp_tokens(g, &k, &vv, &theta)?;
        let proj = b.var(g, "motion")?;
        let motion = deformation_factor(g, &theta, proj)?;
        let sw = StaWeights::bind(g, &mut b, "sta")?;
        let heads = [HeadInputs { query: q, key: ka, value: va }];
        let out = sta_forward(g, &heads, motion.theta_prime, &sw, &MppaConfig::default())?;
        let tgt = g.constant(target.clone());
        let rec = loss_reconstruction(g, out.fused, tgt, m)?;
        let pooled = g.mean(out.fused);
        let fake = g.add_scalar(pooled, -0.3);
        let real = g.constant(Tensor::scalar(0.4));
        let gan = loss_gan(g, real, fake);
        total_loss(g, rec.hole, rec.valid, gan.adversarial, &LossWeights::default())
    };
    case("pipeline_theta_warp_mppa_sta_loss", inputs, loss)
}

/// `total_loss` of the toy generator against selected parameter tensors.
fn generator_case(seed: u64) -> Case {
    let cfg = GeneratorConfig::toy();
    let mut store = ParamStore::new();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    init_specs(&mut store, &generator_specs(&cfg), &mut rng).expect("specs are consistent");
    let names = ["enc0.w", "block0.q.w", "block0.ffn.w", "block0.sta.gate.w2", "dec3.w"];
    let inputs: Vec<Tensor> = names.iter().map(|n| store.get(n).expect("known name").clone()).collect();
    let frames = Tensor::rand_uniform(&[2, 3, cfg.height, cfg.width], 0.0, 1.0, seed + 11);
    let mut masks = Tensor::zeros(&[2, 1, cfg.height, cfg.width]);
    for t in 0..2 {
        for y in 10..30 {
            for x in (8 + 4 * t)..(28 + 4 * t) {
                masks.set(&[t, 0, y, x], 1.0);
            }
        }
    }
    let loss = move |g: &mut Graph, v: &[Var]| -> Result<Var> {
        let mut b = Bound::new(&store, false);
        for (n, &var) in names.iter().zip(v) {
            b.set(n, var);
        }
        let x = g.constant(frames.clone());
        let m = g.constant(masks.clone());
        let out = generate(g, &mut b, &cfg, x, m, None)?;
        let rec = loss_reconstruction(g, out.raw, x, m)?;
        let adv = g.mean(out.composite);
        let adv = g.neg(adv);
        total_loss(g, rec.hole, rec.valid, adv, &LossWeights::default())
    };
    Case {
        name: "generator_total_loss",
        inputs,
        loss: Box::new(loss),
        max_coords: Some(12),
    }
}

pub fn gradient_cases(seed: u64) -> Vec<Case> {
    let mut cases = primitive_cases(seed);
    cases.push(pipeline_case(seed));
    cases.push(generator_case(seed));
    cases
}

pub fn case_names() -> Vec<&'static str> {
    gradient_cases(0).iter().map(|c| c.name).collect()
}

/// Run every case (or only `only`) at step 1e-4 and tolerance 1e-3.
pub fn gradient_suite(seed: u64, only: Option<&str>) -> Result<Vec<CaseResult>> {
    let cases = gradient_cases(seed);
    if let Some(name) = only {
        if !cases.iter().any(|c| c.name == name) {
            return Err(crate::Error::Invalid(format!(
                "unknown gradient case {name:?}; known: {}",
                case_names().join(", ")
            )));
        }
    }
    cases
        .into_iter()
        .filter(|c| only.is_none_or(|n| n == c.name))
        .map(|c| {
            let checker = GradCheck {
                max_coords: c.max_coords,
                seed,
                ..GradCheck::default()
            };
            let report = checker.run(|g, v| (c.loss)(g, v), &c.inputs)?;
            Ok(CaseResult {
                name: c.name.to_string(),
                max_rel_error: report.worst(),
                coords_checked: report.coords_checked,
                coords_skipped: report.coords_skipped,
                passed: report.passed,
            })
        })
        .collect()
}
