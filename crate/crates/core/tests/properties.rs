use proptest::prelude::*;

use devit_core::depth::AlignedSet;
use devit_core::harness::{psnr, sliding_window_schedule, ssim};
use devit_core::mppa::{mppa_branch, BlockLayout, Branch, MppaConfig, SaliencyNorm};
use devit_core::params::{Bound, ParamStore};
use devit_core::patch::{extract_patches, reassemble, Role};
use devit_core::sta::{gate_fuse, init_sta, StaWeights};
use devit_core::{Graph, Tensor};
use rand::SeedableRng;

fn binary_mask(shape: &[usize], seed: u64, p: f64) -> Tensor {
    Tensor::rand_uniform(shape, 0.0, 1.0, seed).map(|u| if u < p { 1.0 } else { 0.0 })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn patches_reassemble_exactly(t in 1usize..4, c in 1usize..4, n in 1usize..5, ph in 1usize..4, pw in 1usize..4, seed in 0u64..1000) {
        let mut g = Graph::new();
        let f = Tensor::rand_uniform(&[t, c, n * ph, n * pw], -1.0, 1.0, seed);
        let fv = g.constant(f.clone());
        let m = g.constant(binary_mask(&[t, 1, n * ph, n * pw], seed + 1, 0.3));
        let p = extract_patches(&mut g, fv, m, n, Role::Value).unwrap();
        prop_assert_eq!(p.geometry.tokens(), t * n * n);
        let back = reassemble(&mut g, &p).unwrap();
        prop_assert_eq!(g.value(back), &f);
    }

    #[test]
    fn branches_partition_the_full_map(t in 1usize..6, n in 1usize..5) {
        let s = BlockLayout { frames: t, per_frame: n * n, branch: Branch::Spatial };
        let tm = BlockLayout { branch: Branch::Temporal, ..s };
        let full = BlockLayout { branch: Branch::Full, ..s };
        for q in 0..s.tokens() {
            let mut keys = s.keys_of(q);
            let other = tm.keys_of(q);
            prop_assert!(keys.iter().all(|k| !other.contains(k)));
            keys.extend(other);
            keys.sort_unstable();
            prop_assert_eq!(keys, full.keys_of(q));
        }
        prop_assert_eq!(s.entries() + tm.entries(), full.entries());
    }

    #[test]
    fn attention_rows_are_distributions(t in 2usize..4, n in 1usize..4, hole in 0.0f64..0.9, seed in 0u64..1000,
                                        norm in prop_oneof![Just(SaliencyNorm::Area), Just(SaliencyNorm::Query), Just(SaliencyNorm::Key)]) {
        let size = 2 * n;
        let mut g = Graph::new();
        let f = g.constant(Tensor::rand_uniform(&[t, 2, size, size], -2.0, 2.0, seed));
        let m = g.constant(binary_mask(&[t, 1, size, size], seed + 7, hole));
        let p = extract_patches(&mut g, f, m, n, Role::Query).unwrap();
        let a = AlignedSet::shared(&p, p.geometry.tokens());
        let cfg = MppaConfig { saliency_norm: norm, scaled: false };
        for branch in [Branch::Full, Branch::Spatial, Branch::Temporal] {
            let out = mppa_branch(&mut g, &p, &a, &a, &cfg, branch).unwrap();
            let s = g.value(out.map.scores);
            let nt = p.geometry.tokens();
            for q in 0..nt {
                let row = &s.data()[q * nt..(q + 1) * nt];
                prop_assert!(row.iter().all(|&x| x >= 0.0 && x.is_finite()));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gate_output_is_convex(seed in 0u64..1000, bias in -5.0f64..5.0) {
        let mut store = ParamStore::new();
        init_sta(&mut store, "sta", 3, 6, 8, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        store.insert("sta.gate.w2", Tensor::rand_uniform(&[8, 2], -3.0, 3.0, seed + 1));
        store.insert("sta.gate.b2", Tensor::new(&[2], vec![bias, -bias]).unwrap());
        let mut g = Graph::new();
        let mut b = Bound::new(&store, false);
        let w = StaWeights::bind(&mut g, &mut b, "sta").unwrap();
        let fs = g.constant(Tensor::rand_uniform(&[2, 3, 4, 4], -1.0, 1.0, seed + 2));
        let ft = g.constant(Tensor::rand_uniform(&[2, 3, 4, 4], -1.0, 1.0, seed + 3));
        let tp = g.constant(Tensor::rand_uniform(&[1, 6], -1.0, 1.0, seed + 4));
        let (fused, gate) = gate_fuse(&mut g, fs, ft, tp, &w).unwrap();
        let gw = g.value(gate).data();
        prop_assert!((gw[0] + gw[1] - 1.0).abs() < 1e-12 && gw[0] >= 0.0 && gw[1] >= 0.0);
        for ((&f, &a), &b) in g.value(fused).data().iter().zip(g.value(fs).data()).zip(g.value(ft).data()) {
            prop_assert!(f >= a.min(b) - 1e-12 && f <= a.max(b) + 1e-12);
        }
    }

    #[test]
    fn window_contains_target_and_stays_in_range(total in 1usize..60, nw in 0usize..4, stride in 1usize..8, pick in 0usize..60) {
        let t = pick % total + 1;
        let w = sliding_window_schedule(t, total, nw, stride).unwrap();
        prop_assert_eq!(w.indices[w.target_position()], t);
        prop_assert!(w.indices.windows(2).all(|p| p[0] < p[1]));
        prop_assert!(w.indices.iter().all(|&i| (1..=total).contains(&i)));
        for d in 1..=nw {
            if t > d { prop_assert!(w.indices.contains(&(t - d))); }
            if t + d <= total { prop_assert!(w.indices.contains(&(t + d))); }
        }
    }

    #[test]
    fn metrics_are_symmetric_and_bounded(seed in 0u64..1000, amp in 0.01f64..0.5) {
        let a = Tensor::rand_uniform(&[3, 16, 16], 0.0, 1.0, seed);
        let noise = Tensor::rand_uniform(&[3, 16, 16], -amp, amp, seed + 1);
        let b = a.zip_map(&noise, |x, y| (x + y).clamp(0.0, 1.0)).unwrap();
        let (p1, p2) = (psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        prop_assert_eq!(p1, p2);
        prop_assert!(p1 > 0.0);
        let s = ssim(&a, &b).unwrap();
        prop_assert!((s - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!(s <= 1.0 + 1e-12 && s > -1.0);
    }

    #[test]
    fn softmax_ignores_row_shifts(seed in 0u64..1000, shift in -50.0f64..50.0) {
        let x = Tensor::rand_uniform(&[3, 5], -4.0, 4.0, seed);
        let mut g = Graph::new();
        let a = g.constant(x.clone());
        let b = g.constant(x.map(|v| v + shift));
        let sa = g.softmax(a, 1).unwrap();
        let sb = g.softmax(b, 1).unwrap();
        prop_assert!(g.value(sa).max_abs_diff(g.value(sb)) < 1e-12);
    }
}
