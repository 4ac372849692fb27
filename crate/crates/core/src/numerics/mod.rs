//! Dense arrays, differentiable primitives and their verification.
//!
//! Sampling uses the align-corners convention: normalized `(-1, -1)` is the
//! centre of the top-left pixel and `(+1, +1)` the centre of the bottom-right
//! pixel. Samples that fall outside the source read zeros.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod spectral;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheck, GradReport};
pub use graph::{Gradients, Graph, SpectralInfo, Var};
pub use spectral::{spectral_normalize, SpectralResult};
pub use tensor::Tensor;

use crate::error::{shape_err, Result};

/// Normalized sampling coordinates, shape `[H_out, W_out, 2]` holding `(x, y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleGrid(Tensor);

impl SampleGrid {
    pub fn new(coords: Tensor) -> Result<Self> {
        let s = coords.shape();
        if s.len() != 3 || s[2] != 2 {
            return Err(shape_err("SampleGrid", format!("expected [H, W, 2], got {s:?}")));
        }
        Ok(Self(coords))
    }

    /// Identity lattice of pixel centres for an `h × w` output.
    pub fn identity(h: usize, w: usize) -> Self {
        Self(Tensor::from_fn(&[h, w, 2], |i| {
            if i[2] == 0 {
                kernels::normalize(i[1] as f64, w)
            } else {
                kernels::normalize(i[0] as f64, h)
            }
        }))
    }

    pub fn height(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }

    /// `(x, y)` at output pixel `(row, col)`.
    pub fn at(&self, row: usize, col: usize) -> (f64, f64) {
        (self.0.get(&[row, col, 0]), self.0.get(&[row, col, 1]))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// Grid for a single 2×3 affine matrix (row-major `[a, b, tx, c, d, ty]`).
pub fn affine_grid(theta: &[f64; 6], out_h: usize, out_w: usize) -> Result<SampleGrid> {
    let mut g = Graph::new();
    let t = g.constant(Tensor::new(&[1, 2, 3], theta.to_vec())?);
    let grid = g.affine_grid(t, out_h, out_w)?;
    SampleGrid::new(g.value(grid).reshape(&[out_h, out_w, 2])?)
}

/// Bilinear sampling of `src[c, h, w]` with zero padding outside the source.
pub fn bilinear_sample(src: &Tensor, grid: &SampleGrid) -> Result<Tensor> {
    let s = src.shape();
    if s.len() != 3 {
        return Err(shape_err("bilinear_sample", format!("src must be [c, h, w], got {s:?}")));
    }
    let mut g = Graph::new();
    let x = g.constant(src.reshape(&[1, s[0], s[1], s[2]])?);
    let gr = g.constant(grid.0.reshape(&[1, grid.height(), grid.width(), 2])?);
    let out = g.grid_sample(x, gr)?;
    g.value(out).reshape(&[s[0], grid.height(), grid.width()])
}

pub fn softmax(v: &Tensor, axis: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(v.clone());
    let y = g.softmax(x, axis)?;
    Ok(g.value(y).clone())
}

/// Plain-tensor convolution of `input[B, C, H, W]`.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let w = g.constant(weight.clone());
    let b = g.constant(bias.clone());
    let y = g.conv2d(x, w, Some(b), stride, padding)?;
    Ok(g.value(y).clone())
}
