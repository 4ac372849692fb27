//! Power-iteration spectral normalisation against a dense SVD.

use nalgebra::DMatrix;

use devit_core::model::{discriminator_specs, init_discriminator, DiscriminatorConfig};
use devit_core::numerics::spectral_normalize;
use devit_core::{Graph, Tensor};

fn top_singular(t: &Tensor) -> f64 {
    let rows = t.shape()[0];
    let cols = t.numel() / rows;
    let m = DMatrix::from_row_slice(rows, cols, t.data());
    m.singular_values().max()
}

#[test]
fn sigma_matches_svd() {
    for (seed, shape) in [(1, vec![4, 6]), (2, vec![8, 3, 3, 3]), (3, vec![5, 2, 3, 5, 5])] {
        let w = Tensor::rand_uniform(&shape, -1.0, 1.0, seed);
        let r = spectral_normalize(&w, 500).unwrap();
        let want = top_singular(&w);
        assert!((r.sigma - want).abs() / want < 1e-9, "{shape:?}: {} vs {want}", r.sigma);
        assert!((top_singular(&r.weight) - 1.0).abs() < 1e-9);
    }
}

#[test]
fn persistent_single_iterations_converge_on_discriminator_weights() {
    let cfg = DiscriminatorConfig::toy();
    let store = init_discriminator(&cfg, 4).unwrap();
    let names: Vec<String> = discriminator_specs(&cfg)
        .into_iter()
        .map(|s| s.name)
        .filter(|n| n.ends_with(".w"))
        .collect();
    assert_eq!(names.len(), 6);
    for name in names {
        let w = store.get(&name).unwrap();
        let mut u: Option<Vec<f64>> = None;
        let mut sigma = 0.0;
        for _ in 0..300 {
            let mut g = Graph::new();
            let v = g.constant(w.clone());
            let (out, info) = g.spectral_norm(v, 1, u.as_deref()).unwrap();
            u = Some(info.u);
            sigma = info.sigma;
            let _ = out;
        }
        let want = top_singular(w);
        assert!((sigma - want).abs() / want < 1e-3, "{name}: {sigma} vs {want}");
        assert!(sigma <= want * (1.0 + 1e-12), "power iteration never overshoots");
    }
}
