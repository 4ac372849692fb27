//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Failing criteria are reported, not hidden; the process exits non-zero only
//! when a check cannot run at all, or when `DEVIT_ACCEPTANCE_STRICT=1` is set
//! and some criterion failed.

use std::time::Instant;

use devit_core::depth::{warp_tokens, AffineParams, AlignedSet};
use devit_core::flops::{flops_estimate, instrumented_multiplies, model_report, FlopsConfig};
use devit_core::harness::metrics::{psnr_from_mse, reference};
use devit_core::harness::{
    gen_masks, inpaint_clip, psnr, ssim, synth_clip, MaskKind, MotionSpec, MotionType, WindowConfig, PSNR_SENTINEL,
};
use devit_core::model::{
    generate, init_generator, loss_gan, total_loss, train_toy, DiscriminatorConfig, GeneratorConfig, LossWeights,
    TraceRow, TrainConfig,
};
use devit_core::mppa::{mppa, mppa_branch, saliency, BlockLayout, Branch, MppaConfig, SaliencyNorm};
use devit_core::params::{Bound, ParamStore};
use devit_core::patch::{extract_patches, reassemble, HeadConfig, Role};
use devit_core::verify::gradient_suite;
use devit_core::{Graph, Tensor};

type Check = Result<(bool, String), String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- oracles

/// Tokens of a `[T, C, H, W]` tensor on an `n×n` grid, flattened `(c, y, x)`,
/// read straight from the tensor layout.
fn flat_tokens(f: &Tensor, n: usize, channels: std::ops::Range<usize>) -> Vec<Vec<f64>> {
    let s = f.shape();
    let (t, h, w) = (s[0], s[2], s[3]);
    let (ph, pw) = (h / n, w / n);
    let mut out = Vec::with_capacity(t * n * n);
    for ti in 0..t {
        for i in 0..n {
            for j in 0..n {
                let mut tok = Vec::with_capacity(channels.len() * ph * pw);
                for c in channels.clone() {
                    for y in 0..ph {
                        for x in 0..pw {
                            tok.push(f.get(&[ti, c, i * ph + y, j * pw + x]));
                        }
                    }
                }
                out.push(tok);
            }
        }
    }
    out
}

/// Unscaled `softmax(QKᵀ)` restricted per row to `keep(q, k)`; zero elsewhere.
fn vanilla_scores(q: &[Vec<f64>], k: &[Vec<f64>], keep: impl Fn(usize, usize) -> bool) -> Vec<Vec<f64>> {
    q.iter()
        .enumerate()
        .map(|(qi, qt)| {
            let logits: Vec<Option<f64>> = k
                .iter()
                .enumerate()
                .map(|(ki, kt)| keep(qi, ki).then(|| qt.iter().zip(kt).map(|(a, b)| a * b).sum()))
                .collect();
            let m = logits.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| l.map_or(0.0, |l| (l - m).exp())).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|x| x / z).collect()
        })
        .collect()
}

fn apply(scores: &[Vec<f64>], v: &[Vec<f64>]) -> Vec<Vec<f64>> {
    scores
        .iter()
        .map(|row| {
            let mut out = vec![0.0; v[0].len()];
            for (a, vt) in row.iter().zip(v) {
                for (o, x) in out.iter_mut().zip(vt) {
                    *o += a * x;
                }
            }
            out
        })
        .collect()
}

fn max_diff_rows(t: &Tensor, rows: &[Vec<f64>]) -> f64 {
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    if flat.len() != t.numel() {
        return f64::INFINITY;
    }
    t.data().iter().zip(&flat).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

/// `W·x + b` of a 1×1 convolution evaluated pixel by pixel.
fn conv1x1(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let s = x.shape();
    let ci = s[1];
    Tensor::from_fn(&[s[0], w.shape()[0], s[2], s[3]], |i| {
        b.get(&[i[1]]) + (0..ci).map(|c| w.get(&[i[1], c, 0, 0]) * x.get(&[i[0], c, i[2], i[3]])).sum::<f64>()
    })
}

// ---------------------------------------------------------------- criteria

fn vanilla_degeneracy() -> Check {
    let (t, n, c, size) = (3, 2, 8, 4);
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let fq = Tensor::rand_uniform(&[t, c, size, size], -1.0, 1.0, 3 * seed);
        let fk = Tensor::rand_uniform(&[t, c, size, size], -1.0, 1.0, 3 * seed + 1);
        let fv = Tensor::rand_uniform(&[t, c, size, size], -1.0, 1.0, 3 * seed + 2);
        let mut g = Graph::new();
        let mask = g.constant(Tensor::zeros(&[t, 1, size, size]));
        let (q, k, v) = (g.constant(fq.clone()), g.constant(fk.clone()), g.constant(fv.clone()));
        let pq = extract_patches(&mut g, q, mask, n, Role::Query).map_err(err)?;
        let pk = extract_patches(&mut g, k, mask, n, Role::Key).map_err(err)?;
        let pv = extract_patches(&mut g, v, mask, n, Role::Value).map_err(err)?;
        let nt = pq.geometry.tokens();
        let theta = AffineParams::identity(&mut g, nt, nt);
        let (ka, va) = warp_tokens(&mut g, &pk, &pv, &theta).map_err(err)?;
        let out = mppa(&mut g, &pq, &ka, &va, &MppaConfig::default()).map_err(err)?;

        let (tq, tk, tv) = (flat_tokens(&fq, n, 0..c), flat_tokens(&fk, n, 0..c), flat_tokens(&fv, n, 0..c));
        let s = vanilla_scores(&tq, &tk, |_, _| true);
        let o = apply(&s, &tv);
        worst = worst
            .max(max_diff_rows(g.value(out.map.scores), &s))
            .max(max_diff_rows(g.value(out.output), &o));
    }
    Ok((worst <= 1e-6, format!("max |MPPA − softmax(QKᵀ)V| = {worst:.2e} over 20 seeds (T=3, N_p=4, c=8)")))
}

fn saliency_values() -> Check {
    // 3×3 patches, one frame each; holes chosen so exactly 2 and 5 pixels are valid in both.
    let s_of = |q_holes: &[(usize, usize)], k_holes: &[(usize, usize)]| -> Result<f64, String> {
        let mut g = Graph::new();
        let mk = |holes: &[(usize, usize)]| {
            let mut m = Tensor::zeros(&[1, 1, 3, 3]);
            for &(y, x) in holes {
                m.set(&[0, 0, y, x], 1.0);
            }
            m
        };
        let f = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let mq = g.constant(mk(q_holes));
        let mkk = g.constant(mk(k_holes));
        let q = extract_patches(&mut g, f, mq, 1, Role::Query).map_err(err)?;
        let k = extract_patches(&mut g, f, mkk, 1, Role::Key).map_err(err)?;
        let s = saliency(&mut g, &q, &AlignedSet::shared(&k, 1), SaliencyNorm::Area).map_err(err)?;
        Ok(g.value(s).item())
    };
    let rows = |r: std::ops::Range<usize>| r.flat_map(|y| (0..3).map(move |x| (y, x))).collect::<Vec<_>>();
    // Case 1: query keeps its top row minus one pixel; key keeps the top row.
    let mut q1 = rows(1..3);
    q1.push((0, 2));
    let s1 = s_of(&q1, &rows(1..3))?;
    // Case 2: the query is fully valid; the key keeps its top row and two pixels of the middle row.
    let q2 = Vec::new();
    let k2: Vec<_> = rows(2..3).into_iter().chain([(1, 0)]).collect();
    let s2 = s_of(&q2, &k2)?;
    let pass = s1 == 2.0 / 9.0 && s2 == 5.0 / 9.0;
    Ok((pass, format!("S = {s1} (want 2/9), S = {s2} (want 5/9), compared with ==")))
}

fn gradient_suite_check() -> Check {
    let res = gradient_suite(0, None).map_err(err)?;
    let failed: Vec<&str> = res.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    let worst = res.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let checked: usize = res.iter().map(|r| r.coords_checked).sum();
    let skipped: usize = res.iter().map(|r| r.coords_skipped).sum();
    let detail = format!(
        "{} cases, {checked} coordinates checked, {skipped} skipped at activation kinks, worst rel error {worst:.2e} (tol 1e-3){}",
        res.len(),
        if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }
    );
    Ok((failed.is_empty(), detail))
}

fn size_identity() -> Check {
    let mut lines = Vec::new();
    let mut pass = true;
    for (t, np) in [(3usize, 4usize), (4, 9), (5, 36)] {
        let n = (np as f64).sqrt() as usize;
        let layout_s = BlockLayout { frames: t, per_frame: np, branch: Branch::Spatial };
        let layout_t = BlockLayout { branch: Branch::Temporal, ..layout_s };
        // Count the entries actually produced by the two branches.
        let mut g = Graph::new();
        let f = g.constant(Tensor::rand_uniform(&[t, 1, n, n], -0.5, 0.5, np as u64));
        let m = g.constant(Tensor::zeros(&[t, 1, n, n]));
        let p = extract_patches(&mut g, f, m, n, Role::Key).map_err(err)?;
        let a = AlignedSet::shared(&p, p.geometry.tokens());
        let cfg = MppaConfig::default();
        let s = mppa_branch(&mut g, &p, &a, &a, &cfg, Branch::Spatial).map_err(err)?;
        let tm = mppa_branch(&mut g, &p, &a, &a, &cfg, Branch::Temporal).map_err(err)?;
        let (sv, tv) = (g.value(s.map.scores), g.value(tm.map.scores));
        let ns = sv.data().iter().filter(|&&x| x != 0.0).count();
        let nt = tv.data().iter().filter(|&&x| x != 0.0).count();
        let overlap = sv.data().iter().zip(tv.data()).filter(|(a, b)| **a != 0.0 && **b != 0.0).count();
        let full = (t * np) * (t * np);
        let ok = ns + nt == full && overlap == 0 && layout_s.entries() + layout_t.entries() == full;
        pass &= ok;
        lines.push(format!("(T={t}, N_p={np}): {ns} + {nt} = {} vs {full}", ns + nt));
    }
    Ok((pass, lines.join("; ")))
}

fn flops_accounting() -> Check {
    let mut pass = true;
    let mut lines = Vec::new();
    for (t, n, size, c) in [(2usize, 2usize, 8usize, 4usize), (3, 2, 8, 4)] {
        let cfg = FlopsConfig::toy(t, n, size, c);
        let est = flops_estimate(&cfg).map_err(err)?.total;
        let counted = instrumented_multiplies(&cfg, 0).map_err(err)? as f64;
        let dev = 100.0 * (est - counted) / counted;
        pass &= dev.abs() <= 5.0;
        lines.push(format!("T={t} N_p={} {size}×{size} C={c}: formula {est} vs counted {counted} ({dev:+.2}%)", n * n));
    }
    let full = model_report(&GeneratorConfig::default(), 5).map_err(err)?;
    lines.push(format!(
        "full config: {} params vs 28.8M ({:+.1}%), {:.1} GFLOPs vs 266 ({:+.1}%) [informational]",
        full.params,
        full.params_deviation_pct,
        full.total_flops / 1e9,
        full.flops_deviation_pct
    ));
    Ok((pass, lines.join("; ")))
}

fn toy_overfit() -> Check {
    let t = 8;
    let clip = synth_clip(&MotionSpec::new(MotionType::B), t, 48, 48, 7).map_err(err)?;
    let masks = gen_masks(MaskKind::Moving, t, 48, 48, 7, 0.2).map_err(err)?;
    let gcfg = GeneratorConfig::toy();
    let weights = LossWeights { adv: 0.0, ..LossWeights::default() };
    let tcfg = TrainConfig { iters: 500, seed: 1, ..TrainConfig::default() };
    let run = || -> Result<Vec<TraceRow>, String> {
        train_toy(&clip.frames, &masks, &gcfg, &DiscriminatorConfig::toy(), &weights, &tcfg)
            .map(|o| o.trace)
            .map_err(err)
    };
    let (a, b) = std::thread::scope(|s| {
        let h = s.spawn(run);
        let a = run();
        (a, h.join().map_err(|_| "training thread panicked".to_string()))
    });
    let (a, b) = (a?, b??);
    let same = a.len() == b.len()
        && a.iter().zip(&b).all(|(x, y)| {
            [x.l_hole, x.l_valid, x.l_adv, x.l_d, x.total].map(f64::to_bits)
                == [y.l_hole, y.l_valid, y.l_adv, y.l_d, y.total].map(f64::to_bits)
        });
    let (first, last) = (a[0].l_hole, a[a.len() - 1].l_hole);
    let ratio = last / first;
    Ok((
        ratio <= 0.2 && same,
        format!(
            "L_hole {first:.4} → {last:.4} after 500 iterations (ratio {ratio:.3}, need ≤ 0.2); rerun bit-identical: {same}; mask coverage {:.3}",
            masks.mean()
        ),
    ))
}

fn loss_arithmetic() -> Check {
    let mut g = Graph::new();
    let hinge = |g: &mut Graph, r: f64, f: f64| {
        let dr = g.constant(Tensor::full(&[1, 1, 2, 3, 3], r));
        let df = g.constant(Tensor::full(&[1, 1, 2, 3, 3], f));
        let l = loss_gan(g, dr, df);
        (g.value(l.discriminator).item(), g.value(l.adversarial).item())
    };
    let (ld_a, _) = hinge(&mut g, 1.0, -1.0);
    let (ld_b, _) = hinge(&mut g, 0.0, 0.0);
    let (_, adv) = hinge(&mut g, 0.0, 0.7);
    let h = g.constant(Tensor::scalar(0.2));
    let v = g.constant(Tensor::scalar(0.1));
    let a = g.constant(Tensor::scalar(-0.5));
    let w = LossWeights { hole: 1.0, valid: 1.0, adv: 0.01 };
    let tot = total_loss(&mut g, h, v, a, &w).map_err(err)?;
    let tot = g.value(tot).item();
    // The binary64 inputs 0.2 + 0.1 − 0.005 sum exactly to a value whose
    // correct rounding is the double just above 0.295 (math.fsum agrees).
    const CORRECTLY_ROUNDED: f64 = 0.29500000000000004;
    let ulps = (tot.to_bits() as i64 - 0.295f64.to_bits() as i64).abs();
    let pass = ld_a == 0.0 && ld_b == 2.0 && adv == -0.7 && tot == CORRECTLY_ROUNDED;
    Ok((
        pass,
        format!(
            "L_D(1,−1) = {ld_a}, L_D(0,0) = {ld_b}, L_adv(0.7) = {adv}, total = {tot:?} \
             (correctly rounded binary64 sum; {ulps} ulp from the literal 0.295)"
        ),
    ))
}

fn round_trips() -> Check {
    // Identity warp.
    let mut g = Graph::new();
    let f = g.constant(Tensor::rand_uniform(&[2, 3, 12, 12], -1.0, 1.0, 5));
    let m = g.constant(Tensor::zeros(&[2, 1, 12, 12]));
    let p = extract_patches(&mut g, f, m, 3, Role::Key).map_err(err)?;
    let nt = p.geometry.tokens();
    let id = AffineParams::identity(&mut g, nt, nt);
    let (kw, _) = warp_tokens(&mut g, &p, &p, &id).map_err(err)?;
    let src = g.value(p.tokens).data().to_vec();
    let warped = g.value(kw.tokens).data();
    let warp_err = warped
        .chunks(src.len())
        .flat_map(|rows| rows.iter().zip(&src).map(|(a, b)| (a - b).abs()))
        .fold(0.0, f64::max);

    // Extract/reassemble for each head grid on a full-size feature map.
    let heads = HeadConfig::default();
    let mut exact = true;
    let mut g = Graph::new();
    let fv = Tensor::rand_uniform(&[2, 4, 60, 108], -1.0, 1.0, 9);
    let f = g.constant(fv.clone());
    let m = g.constant(Tensor::zeros(&[2, 1, 60, 108]));
    for &n in &heads.patch_grids {
        let p = extract_patches(&mut g, f, m, n, Role::Value).map_err(err)?;
        let back = reassemble(&mut g, &p).map_err(err)?;
        exact &= g.value(back).data().iter().zip(fv.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    }

    // Paste-back through an untrained generator with real holes.
    let cfg = GeneratorConfig::toy();
    let params = init_generator(&cfg, 3).map_err(err)?;
    let clip = synth_clip(&MotionSpec::new(MotionType::C), 3, 48, 48, 2).map_err(err)?;
    let masks = gen_masks(MaskKind::Moving, 3, 48, 48, 2, 0.25).map_err(err)?;
    let mut g = Graph::new();
    let mut b = Bound::new(&params, false);
    let x = g.constant(clip.frames.clone());
    let mk = g.constant(masks.clone());
    let out = generate(&mut g, &mut b, &cfg, x, mk, None).map_err(err)?;
    let comp = g.value(out.composite);
    let mut kept = true;
    let mut checked = 0usize;
    for ti in 0..3 {
        for c in 0..3 {
            for y in 0..48 {
                for xx in 0..48 {
                    if masks.get(&[ti, 0, y, xx]) == 0.0 {
                        checked += 1;
                        kept &= comp.get(&[ti, c, y, xx]).to_bits() == clip.frames.get(&[ti, c, y, xx]).to_bits();
                    }
                }
            }
        }
    }
    Ok((
        warp_err <= 1e-12 && exact && kept,
        format!(
            "identity warp max err {warp_err:.1e}; reassemble bit-exact for grids {:?}: {exact}; {checked} valid pixels bit-identical after paste-back: {kept}",
            heads.patch_grids
        ),
    ))
}

fn identity_initialisation() -> Check {
    let cfg = GeneratorConfig::toy();
    let params: ParamStore = init_generator(&cfg, 11).map_err(err)?;

    // Whole-clip sliding-window pipeline with holes.
    let total = 6;
    let clip = synth_clip(&MotionSpec::new(MotionType::B), total, 48, 48, 4).map_err(err)?;
    let masks = gen_masks(MaskKind::Stationary, total, 48, 48, 4, 0.2).map_err(err)?;
    let y = inpaint_clip(&clip.frames, &masks, &params, &cfg, &WindowConfig::default(), None).map_err(err)?;
    let shaped = y.shape() == [total, 3, 48, 48];
    let finite = y.data().iter().all(|v| v.is_finite());

    // Hole-free clip: every head's branch maps against the plain-softmax oracle.
    let t = 3;
    let frames = synth_clip(&MotionSpec::new(MotionType::A), t, 48, 48, 8).map_err(err)?.frames;
    let mut g = Graph::new();
    let mut b = Bound::new(&params, false);
    let x = g.constant(frames);
    let m = g.constant(Tensor::zeros(&[t, 1, 48, 48]));
    let out = generate(&mut g, &mut b, &cfg, x, m, None).map_err(err)?;
    let feat = g.value(out.features).clone();
    let p = |n: &str| params.get(n).map_err(err);
    let q = conv1x1(&feat, p("block0.q.w")?, p("block0.q.b")?);
    let k = conv1x1(&feat, p("block0.k.w")?, p("block0.k.b")?);
    let block = &out.blocks[0];
    let theta_dev = g
        .value(block.theta.theta)
        .data()
        .chunks(6)
        .flat_map(|r| r.iter().zip([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).map(|(a, b)| (a - b).abs()))
        .fold(0.0, f64::max);
    let mut worst = 0.0f64;
    let ranges = cfg.heads.channel_ranges(cfg.channels()).map_err(err)?;
    for ((range, &n), maps) in ranges.into_iter().zip(&cfg.heads.patch_grids).zip(&block.sta.maps) {
        let (tq, tk) = (flat_tokens(&q, n, range.clone()), flat_tokens(&k, n, range));
        let np = n * n;
        let spatial = vanilla_scores(&tq, &tk, |a, b| a / np == b / np);
        let temporal = vanilla_scores(&tq, &tk, |a, b| a / np != b / np);
        worst = worst.max(max_diff_rows(g.value(maps.spatial.scores), &spatial));
        let tm = maps.temporal.ok_or("temporal branch missing")?;
        worst = worst.max(max_diff_rows(g.value(tm.scores), &temporal));
        // The same aligned tokens through a single full-softmax MPPA.
        let h = block.heads.iter().find(|h| h.query.geometry.n == n).ok_or("head missing")?;
        let full = mppa(&mut g, &h.query, &h.key, &h.value, &MppaConfig::default()).map_err(err)?;
        worst = worst.max(max_diff_rows(g.value(full.map.scores), &vanilla_scores(&tq, &tk, |_, _| true)));
    }
    let heads = cfg.heads.heads();
    Ok((
        shaped && finite && worst <= 1e-6,
        format!(
            "pipeline output {:?} finite: {finite}; θ max deviation from identity {theta_dev:.1e}; \
             {heads} heads, max |score − vanilla| {worst:.2e}",
            y.shape()
        ),
    ))
}

fn metrics_sanity() -> Check {
    let x = Tensor::rand_uniform(&[3, 24, 24], 0.0, 1.0, 1);
    let p_same = psnr(&x, &x).map_err(err)?;
    let s_same = ssim(&x, &x).map_err(err)?;
    let gt = Tensor::rand_uniform(&[3, 24, 24], 0.2, 0.8, 2);
    let shifted = Tensor::from_fn(gt.shape(), |i| gt.get(i) + if (i[1] + i[2]) % 2 == 0 { 0.1 } else { -0.1 });
    let p01 = psnr(&shifted, &gt).map_err(err)?;
    let p_formula = psnr_from_mse(0.01);
    let mut worst = 0.0f64;
    for seed in 0..5u64 {
        let a = Tensor::rand_uniform(&[3, 32, 32], 0.0, 1.0, 100 + seed);
        let noise = Tensor::rand_uniform(&[3, 32, 32], -0.2, 0.2, 200 + seed);
        let b = a.zip_map(&noise, |u, v| (u + v).clamp(0.0, 1.0)).map_err(err)?;
        worst = worst
            .max((psnr(&b, &a).map_err(err)? - reference::psnr(&b, &a).map_err(err)?).abs())
            .max((ssim(&b, &a).map_err(err)? - reference::ssim(&b, &a).map_err(err)?).abs());
    }
    let pass = p_same == PSNR_SENTINEL
        && (s_same - 1.0).abs() <= 1e-12
        && (p01 - 20.0).abs() <= 1e-6
        && (p_formula - 20.0).abs() <= 1e-6
        && worst <= 1e-6;
    Ok((
        pass,
        format!(
            "psnr(x,x) = {p_same}, ssim(x,x) = {s_same}, psnr at MSE 0.01 = {p01:.9} dB, \
             max |fast − brute force| over 5 pairs {worst:.1e}"
        ),
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Check); 10] = [
        ("vanilla degeneracy", vanilla_degeneracy),
        ("saliency worked example", saliency_values),
        ("gradient suite", gradient_suite_check),
        ("branch size identity", size_identity),
        ("FLOPs accounting", flops_accounting),
        ("toy overfit", toy_overfit),
        ("loss arithmetic", loss_arithmetic),
        ("warp/patch round-trips", round_trips),
        ("identity initialisation", identity_initialisation),
        ("metrics sanity", metrics_sanity),
    ];
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut passed = 0;
    let mut ran = 0;
    let mut broken = false;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if filter.as_deref().is_some_and(|p| !name.contains(p)) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let res = f();
        let secs = start.elapsed().as_secs_f64();
        match res {
            Ok((ok, detail)) => {
                passed += ok as usize;
                println!("{} criterion {:>2} {name}: {detail} [{secs:.1} s]", if ok { "PASS" } else { "FAIL" }, i + 1);
            }
            Err(e) => {
                broken = true;
                println!("FAIL criterion {:>2} {name}: could not run: {e} [{secs:.1} s]", i + 1);
            }
        }
    }
    println!("acceptance: {passed}/{ran} criteria pass");
    let strict = std::env::var("DEVIT_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if broken || (strict && passed < ran) {
        std::process::exit(1);
    }
}
