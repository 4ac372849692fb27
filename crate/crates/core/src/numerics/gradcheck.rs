//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::tensor::Tensor;

/// Floor of the relative-error denominator.
pub const REL_EPS: f64 = 1e-8;
pub const DEFAULT_STEP: f64 = 1e-4;
pub const DEFAULT_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradReport {
    /// Max relative error over the checked coordinates of each input.
    pub max_rel_error: Vec<f64>,
    pub step: f64,
    pub tolerance: f64,
    pub coords_checked: usize,
    /// Coordinates whose ±step stencil straddles a non-differentiable point
    /// (different kink signatures on the two sides); not compared.
    pub coords_skipped: usize,
    pub passed: bool,
}

impl GradReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_EPS)
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many coordinates per input (sampled with `seed`).
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            max_coords: None,
            seed: 0,
        }
    }
}

impl GradCheck {
    pub fn run<F>(&self, f: F, inputs: &[Tensor]) -> Result<GradReport>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        let eval = |vals: &[Tensor]| -> Result<(f64, u64)> {
            let mut g = Graph::new();
            let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
            let out = f(&mut g, &vars)?;
            let v = g.value(out);
            if v.numel() != 1 {
                return Err(Error::NonScalarRoot(v.shape().to_vec()));
            }
            Ok((v.item(), g.kink_signature()))
        };

        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let root = f(&mut g, &vars)?;
        let grads = g.backward(root)?;

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut work: Vec<Tensor> = inputs.to_vec();
        let mut max_rel_error = Vec::with_capacity(inputs.len());
        let mut checked = 0;
        let mut skipped = 0;
        for (i, input) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[i], input.shape());
            let n = input.numel();
            let coords: Vec<usize> = match self.max_coords {
                Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
                _ => (0..n).collect(),
            };
            let mut worst: f64 = 0.0;
            for c in coords {
                let orig = input.data()[c];
                work[i].data_mut()[c] = orig + self.step;
                let (fp, kp) = eval(&work)?;
                work[i].data_mut()[c] = orig - self.step;
                let (fm, km) = eval(&work)?;
                work[i].data_mut()[c] = orig;
                if kp != km {
                    skipped += 1;
                    continue;
                }
                let numeric = (fp - fm) / (2.0 * self.step);
                worst = worst.max(rel_error(analytic.data()[c], numeric));
                checked += 1;
            }
            max_rel_error.push(worst);
        }
        let passed = checked > 0 && max_rel_error.iter().all(|&e| e <= self.tolerance);
        Ok(GradReport {
            max_rel_error,
            step: self.step,
            tolerance: self.tolerance,
            coords_checked: checked,
            coords_skipped: skipped,
            passed,
        })
    }
}

/// Check every coordinate of every input at the default tolerance.
pub fn grad_check<F>(f: F, inputs: &[Tensor], step: f64) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    GradCheck {
        step,
        ..GradCheck::default()
    }
    .run(f, inputs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_is_exact() {
        let w = Tensor::rand_uniform(&[3, 4], -1.0, 1.0, 7);
        let x = Tensor::rand_uniform(&[3, 4], -1.0, 1.0, 8);
        let r = grad_check(
            |g, v| {
                let w = g.constant(w.clone());
                let p = g.mul(v[0], w)?;
                Ok(g.sum(p))
            },
            &[x],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(r.worst() <= 1e-10, "{r:?}");
        assert!(r.passed);
    }

    #[test]
    fn constant_closure_has_zero_gradients() {
        let x = Tensor::rand_uniform(&[2, 2], -1.0, 1.0, 9);
        let r = grad_check(|g, _| Ok(g.constant(Tensor::scalar(3.0))), &[x], DEFAULT_STEP).unwrap();
        assert_eq!(r.worst(), 0.0);
        assert!(r.passed);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // relu at its kink: analytic slope 0, central difference 0.5
        let x = Tensor::new(&[1], vec![0.0]).unwrap();
        let r = grad_check(
            |g, v| {
                let a = g.relu(v[0]);
                Ok(g.sum(a))
            },
            &[x],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(!r.passed);
    }
}
