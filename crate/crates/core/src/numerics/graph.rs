//! Reverse-mode differentiation over a single-owner operation graph.
//!
//! A [`Graph`] records every value produced during a forward pass together with
//! the operation that produced it. [`Graph::backward`] walks the record in
//! reverse and accumulates gradients for every leaf created with
//! `requires_grad = true`. Graphs are not `Sync`; build one per forward pass.

use std::rc::Rc;

use crate::error::{shape_err, Error, Result};
use crate::numerics::kernels::{self, Conv2dGeom, Conv3dGeom, SampleGeom};
use crate::numerics::spectral::{power_iteration, SPECTRAL_EPS};
use crate::numerics::tensor::{strides_of, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, b_shared: bool },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Gather { x: Var, index: Rc<Vec<usize>> },
    GatherRows { x: Var, rows: Rc<Vec<usize>> },
    Concat { parts: Vec<Var>, axis: usize },
    Tanh(Var),
    LeakyRelu(Var, f64),
    Abs(Var),
    Exp(Var),
    Softmax { x: Var, axis: usize },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: Conv2dGeom },
    Conv3d { x: Var, w: Var, b: Option<Var>, geom: Conv3dGeom },
    AffineGrid { theta: Var, h: usize, w: usize },
    GridSample { src: Var, grid: Var, geom: SampleGeom, src_of: Option<Rc<Vec<usize>>> },
    SpectralNorm { w: Var, u: Vec<f64>, v: Vec<f64>, sigma: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Outcome of a graph-level spectral normalization.
#[derive(Clone, Debug)]
pub struct SpectralInfo {
    pub sigma: f64,
    pub u: Vec<f64>,
    pub degenerate: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    multiplies: u64,
    kinks: u64,
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` if `v` did not influence the root.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside the broadcast `out` shape (0 on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides_of(shape);
    let off = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < off || shape[i - off] == 1 {
                0
            } else {
                s[i - off]
            }
        })
        .collect()
}

/// Visit `(out, ia, ib)` flat offsets for a broadcast binary op.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n: usize = out.iter().product();
    if n == 0 {
        return;
    }
    if out.is_empty() {
        f(0, 0, 0);
        return;
    }
    let r = out.len();
    let last = out[r - 1];
    let (la, lb) = (sa[r - 1], sb[r - 1]);
    let mut idx = vec![0usize; r];
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut o = 0;
    while o < n {
        for j in 0..last {
            f(o + j, ia + j * la, ib + j * lb);
        }
        o += last;
        // advance the outer axes
        let mut ax = r - 1;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            ia -= sa[ax] * out[ax];
            ib -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

#[derive(Clone, Copy)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Fingerprint of the side of every non-differentiable point the forward
    /// pass has met (activation signs, bilinear sampling cells). Two inputs
    /// with equal fingerprints lie in the same smooth piece of the graph.
    pub fn kink_signature(&self) -> u64 {
        self.kinks
    }

    fn note_kinks(&mut self, bits: impl Iterator<Item = i64>) {
        let mut h = self.kinks;
        for b in bits {
            h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3).rotate_left(5);
        }
        self.kinks = h;
    }

    fn note_sample_cells(&mut self, grid: Var, h: usize, w: usize) {
        let cells: Vec<i64> = self
            .value(grid)
            .data()
            .chunks_exact(2)
            .flat_map(|p| [kernels::unnormalize(p[0], w).floor() as i64, kernels::unnormalize(p[1], h).floor() as i64])
            .collect();
        self.note_kinks(cells.into_iter());
    }

    /// Running count of multiplications (and divisions) executed by forward ops.
    pub fn multiplies(&self) -> u64 {
        self.multiplies
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.all_finite() || !value.data().iter().any(|v| v.is_nan()));
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn binary(&mut self, a: Var, b: Var, kind: BinKind) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out = broadcast_shape(&sa, &sb)
            .ok_or_else(|| shape_err("broadcast", format!("{sa:?} vs {sb:?}")))?;
        let xa = self.value(a).data();
        let xb = self.value(b).data();
        let mut data = vec![0.0; out.iter().product()];
        let f = |x: f64, y: f64| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
            BinKind::Div => x / y,
        };
        if sa == sb {
            for ((d, &x), &y) in data.iter_mut().zip(xa).zip(xb) {
                *d = f(x, y);
            }
        } else {
            let ba = broadcast_strides(&sa, &out);
            let bb = broadcast_strides(&sb, &out);
            for_each_broadcast(&out, &ba, &bb, |o, i, j| data[o] = f(xa[i], xb[j]));
        }
        if matches!(kind, BinKind::Mul | BinKind::Div) {
            self.multiplies += data.len() as u64;
        }
        let value = Tensor::from_parts(out, data);
        let op = match kind {
            BinKind::Add => Op::Add(a, b),
            BinKind::Sub => Op::Sub(a, b),
            BinKind::Mul => Op::Mul(a, b),
            BinKind::Div => Op::Div(a, b),
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    /// Broadcasting elementwise sum.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Mul)
    }

    /// Broadcasting elementwise quotient; the caller keeps the divisor away from zero.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Div)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).map(|v| v * s);
        self.multiplies += value.numel() as u64;
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale(x, s), rg)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).map(|v| v + s);
        let rg = self.rg(&[x]);
        self.push(value, Op::AddScalar(x), rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).mean());
        let rg = self.rg(&[x]);
        self.push(value, Op::Mean(x), rg)
    }

    /// Sum over `axis`, keeping it as a length-1 axis.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("sum_axis", format!("axis {axis} on {shape:?}")));
        }
        let (outer, len, inner) = kernels::axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let row = &src[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += s;
                }
            }
        }
        let mut oshape = shape;
        oshape[axis] = 1;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(oshape, out), Op::SumAxis { x, axis }, rg))
    }

    /// Batched matrix product over the trailing two axes. `b` may be rank 2 and
    /// shared by every batch entry of `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?} needs rank ≥ 2")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let b_shared = sb.len() == 2 && sa.len() > 2;
        if k != kb || (!b_shared && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let xa = self.value(a).data();
        let xb = self.value(b).data();
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            let bb = if b_shared { xb } else { &xb[i * k * n..(i + 1) * k * n] };
            kernels::gemm(
                m,
                k,
                n,
                &xa[i * m * k..(i + 1) * m * k],
                false,
                bb,
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        self.multiplies += (batch * m * k * n) as u64;
        let mut oshape = sa[..sa.len() - 2].to_vec();
        oshape.extend([m, n]);
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::from_parts(oshape, out),
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                b_shared,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", format!("perm {perm:?} on {shape:?}")));
        }
        let index = Rc::new(permute_index(&shape, perm));
        let oshape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let src = self.value(x).data();
        let data = index.iter().map(|&i| src[i]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(oshape, data),
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// `out[i] = x.flat[index[i]]`, reshaped to `shape`. Backward scatter-adds.
    pub fn gather(&mut self, x: Var, index: Rc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let n = self.value(x).numel();
        if shape.iter().product::<usize>() != index.len() {
            return Err(shape_err("gather", format!("{} indices for shape {shape:?}", index.len())));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(shape_err("gather", format!("index {bad} out of range {n}")));
        }
        let src = self.value(x).data();
        let data = index.iter().map(|&i| src[i]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape.to_vec(), data), Op::Gather { x, index }, rg))
    }

    /// Rows of the leading axis: `out[i] = x[rows[i]]`. Backward scatter-adds.
    pub fn gather_rows(&mut self, x: Var, rows: Rc<Vec<usize>>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let Some(&r) = shape.first() else {
            return Err(shape_err("gather_rows", "scalar input"));
        };
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(shape_err("gather_rows", format!("row {bad} out of range {r}")));
        }
        let width: usize = shape[1..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows.len() * width);
        for &i in rows.iter() {
            data.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        let mut oshape = shape;
        oshape[0] = rows.len();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(oshape, data), Op::GatherRows { x, rows }, rg))
    }

    /// Contiguous sub-range of one axis.
    pub fn slice(&mut self, x: Var, axis: usize, range: std::ops::Range<usize>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || range.end > shape[axis] || range.start > range.end {
            return Err(shape_err("slice", format!("{range:?} on axis {axis} of {shape:?}")));
        }
        let (outer, len, inner) = kernels::axis_split(&shape, axis);
        let mut index = Vec::with_capacity(outer * range.len() * inner);
        for o in 0..outer {
            let base = o * len * inner;
            index.extend(base + range.start * inner..base + range.end * inner);
        }
        let mut oshape = shape;
        oshape[axis] = range.len();
        self.gather(x, Rc::new(index), &oshape)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| Error::Invalid("concat of nothing".into()))?).to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {axis} on {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(shape_err("concat", format!("{s:?} vs {first:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::axis_split(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut oshape = first;
        oshape[axis] = total;
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_parts(oshape, data),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        let rg = self.rg(&[x]);
        self.push(value, Op::Tanh(x), rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let signs: Vec<i64> = self.value(x).data().iter().map(|&v| (v > 0.0) as i64).collect();
        self.note_kinks(signs.into_iter());
        let value = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        let rg = self.rg(&[x]);
        self.push(value, Op::LeakyRelu(x, slope), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let signs: Vec<i64> = self.value(x).data().iter().map(|&v| (v > 0.0) as i64).collect();
        self.note_kinks(signs.into_iter());
        let value = self.value(x).map(f64::abs);
        let rg = self.rg(&[x]);
        self.push(value, Op::Abs(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::exp);
        let rg = self.rg(&[x]);
        self.push(value, Op::Exp(x), rg)
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("softmax", format!("axis {axis} on {shape:?}")));
        }
        let (outer, len, inner) = kernels::axis_split(&shape, axis);
        let data = kernels::softmax_forward(self.value(x).data(), outer, len, inner);
        self.multiplies += data.len() as u64;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Softmax { x, axis }, rg))
    }

    /// Cross-correlation of `x[B,C,H,W]` with `w[O,C,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 {
            return Err(shape_err("conv2d", format!("input {sx:?}, weight {sw:?} must be rank 4")));
        }
        if sx[1] != sw[1] {
            return Err(shape_err(
                "conv2d",
                format!("input channel axis 1 = {} but weight axis 1 = {}", sx[1], sw[1]),
            ));
        }
        if stride == 0 || sx[2] + 2 * pad < sw[2] || sx[3] + 2 * pad < sw[3] {
            return Err(shape_err(
                "conv2d",
                format!("kernel {}x{} does not fit input {}x{} with padding {pad}", sw[2], sw[3], sx[2], sx[3]),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(shape_err("conv2d", format!("bias {:?} vs {} output channels", self.shape(b), sw[0])));
            }
        }
        let geom = Conv2dGeom {
            batch: sx[0],
            c_in: sx[1],
            h: sx[2],
            w: sx[3],
            c_out: sw[0],
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        self.multiplies += geom.multiplies();
        let shape = vec![geom.batch, geom.c_out, geom.out_h(), geom.out_w()];
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Conv2d { x, w, b, geom }, rg))
    }

    /// 3-D cross-correlation of `x[B,C,D,H,W]` with `w[O,C,kd,kh,kw]`.
    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 5 || sw.len() != 5 || sx[1] != sw[1] {
            return Err(shape_err("conv3d", format!("input {sx:?}, weight {sw:?}")));
        }
        for a in 0..3 {
            if stride[a] == 0 || sx[2 + a] + 2 * pad[a] < sw[2 + a] {
                return Err(shape_err(
                    "conv3d",
                    format!("kernel axis {} ({}) does not fit input {} with padding {}", a, sw[2 + a], sx[2 + a], pad[a]),
                ));
            }
        }
        let geom = Conv3dGeom {
            batch: sx[0],
            c_in: sx[1],
            dims: [sx[2], sx[3], sx[4]],
            c_out: sw[0],
            kernel: [sw[2], sw[3], sw[4]],
            stride,
            pad,
        };
        let out = kernels::conv3d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        self.multiplies += geom.multiplies();
        let o = geom.out_dims();
        let shape = vec![geom.batch, geom.c_out, o[0], o[1], o[2]];
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Conv3d { x, w, b, geom }, rg))
    }

    /// `theta[B,2,3]` → sampling grid `[B,h,w,2]` holding `θ·(x, y, 1)ᵀ`.
    pub fn affine_grid(&mut self, theta: Var, h: usize, w: usize) -> Result<Var> {
        let st = self.shape(theta).to_vec();
        if st.len() != 3 || st[1] != 2 || st[2] != 3 || h == 0 || w == 0 {
            return Err(shape_err("affine_grid", format!("theta {st:?}, size {h}x{w}")));
        }
        let batch = st[0];
        let th = self.value(theta).data();
        let mut out = Vec::with_capacity(batch * h * w * 2);
        for b in 0..batch {
            let t = &th[b * 6..b * 6 + 6];
            for y in 0..h {
                let yn = kernels::normalize(y as f64, h);
                for x in 0..w {
                    let xn = kernels::normalize(x as f64, w);
                    out.push(t[0] * xn + t[1] * yn + t[2]);
                    out.push(t[3] * xn + t[4] * yn + t[5]);
                }
            }
        }
        self.multiplies += (batch * h * w * 4) as u64;
        let rg = self.rg(&[theta]);
        Ok(self.push(
            Tensor::from_parts(vec![batch, h, w, 2], out),
            Op::AffineGrid { theta, h, w },
            rg,
        ))
    }

    /// Bilinear sampling of `src[B,C,H,W]` at `grid[B|1,Ho,Wo,2]` with zero padding.
    pub fn grid_sample(&mut self, src: Var, grid: Var) -> Result<Var> {
        let ss = self.shape(src).to_vec();
        let sg = self.shape(grid).to_vec();
        if ss.len() != 4 || sg.len() != 4 || sg[3] != 2 || (sg[0] != ss[0] && sg[0] != 1) {
            return Err(shape_err("grid_sample", format!("src {ss:?}, grid {sg:?}")));
        }
        let geom = SampleGeom {
            batch: ss[0],
            channels: ss[1],
            h: ss[2],
            w: ss[3],
            out_h: sg[1],
            out_w: sg[2],
            grid_shared: sg[0] == 1 && ss[0] != 1,
        };
        self.note_sample_cells(grid, geom.h, geom.w);
        let out = kernels::grid_sample_forward(&geom, self.value(src).data(), self.value(grid).data(), None);
        self.multiplies += (geom.batch * sg[1] * sg[2] * (4 * geom.channels + 4)) as u64;
        let rg = self.rg(&[src, grid]);
        Ok(self.push(
            Tensor::from_parts(vec![ss[0], ss[1], sg[1], sg[2]], out),
            Op::GridSample { src, grid, geom, src_of: None },
            rg,
        ))
    }

    /// Bilinear sampling where output batch `b` reads `src[src_of[b]]` through
    /// `grid[b]`; used to warp one source patch onto many targets without copying it.
    pub fn grid_sample_indexed(&mut self, src: Var, grid: Var, src_of: Rc<Vec<usize>>) -> Result<Var> {
        let ss = self.shape(src).to_vec();
        let sg = self.shape(grid).to_vec();
        if ss.len() != 4 || sg.len() != 4 || sg[3] != 2 || src_of.len() != sg[0] {
            return Err(shape_err("grid_sample_indexed", format!("src {ss:?}, grid {sg:?}, {} source ids", src_of.len())));
        }
        if let Some(&bad) = src_of.iter().find(|&&i| i >= ss[0]) {
            return Err(shape_err("grid_sample_indexed", format!("source id {bad} of {}", ss[0])));
        }
        let geom = SampleGeom {
            batch: sg[0],
            channels: ss[1],
            h: ss[2],
            w: ss[3],
            out_h: sg[1],
            out_w: sg[2],
            grid_shared: false,
        };
        self.note_sample_cells(grid, geom.h, geom.w);
        let out = kernels::grid_sample_forward(&geom, self.value(src).data(), self.value(grid).data(), Some(&src_of));
        self.multiplies += (geom.batch * sg[1] * sg[2] * (4 * geom.channels + 4)) as u64;
        let rg = self.rg(&[src, grid]);
        Ok(self.push(
            Tensor::from_parts(vec![sg[0], ss[1], sg[1], sg[2]], out),
            Op::GridSample { src, grid, geom, src_of: Some(src_of) },
            rg,
        ))
    }

    /// Divide `w` (matrix view: leading axis × rest) by its largest singular value,
    /// estimated with `iters` power-iteration steps started from `u0`. The singular
    /// vectors are held constant in the backward pass.
    pub fn spectral_norm(&mut self, w: Var, iters: usize, u0: Option<&[f64]>) -> Result<(Var, SpectralInfo)> {
        let shape = self.shape(w).to_vec();
        if shape.is_empty() {
            return Err(shape_err("spectral_norm", "scalar weight"));
        }
        let rows = shape[0];
        let cols = self.value(w).numel() / rows.max(1);
        let est = power_iteration(self.value(w).data(), rows, cols, iters, u0);
        if est.sigma < SPECTRAL_EPS {
            log::warn!("spectral_norm: near-zero weight (sigma = {:.3e}); returned unchanged", est.sigma);
            let info = SpectralInfo {
                sigma: est.sigma,
                u: est.u,
                degenerate: true,
            };
            let value = self.value(w).clone();
            let rg = self.rg(&[w]);
            let out = self.push(value, Op::Scale(w, 1.0), rg);
            return Ok((out, info));
        }
        let value = self.value(w).map(|x| x / est.sigma);
        self.multiplies += value.numel() as u64;
        let rg = self.rg(&[w]);
        let info = SpectralInfo {
            sigma: est.sigma,
            u: est.u.clone(),
            degenerate: false,
        };
        let out = self.push(
            value,
            Op::SpectralNorm {
                w,
                u: est.u,
                v: est.v,
                sigma: est.sigma,
            },
            rg,
        );
        Ok((out, info))
    }

    /// Populate gradients for every `requires_grad` leaf reachable from `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = &self.nodes[root.0].value;
        if rv.numel() != 1 {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        let mut leaves: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves[i] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(Gradients { grads: leaves })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contrib) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    /// Reduce a gradient over the broadcast output shape back to `shape`.
    fn unbroadcast(out: &[usize], shape: &[usize], g: &[f64], scale: impl Fn(usize, usize) -> f64) -> Vec<f64> {
        let n: usize = shape.iter().product();
        let mut acc = vec![0.0; n];
        if out == shape {
            for (o, (a, &gv)) in acc.iter_mut().zip(g).enumerate() {
                *a = gv * scale(o, o);
            }
            return acc;
        }
        let sa = broadcast_strides(shape, out);
        let zero = vec![0usize; out.len()];
        for_each_broadcast(out, &sa, &zero, |o, i, _| acc[i] += g[o] * scale(o, i));
        acc
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.requires_grad(*a) {
                    let ga = Self::unbroadcast(out_shape, self.shape(*a), g, |_, _| 1.0);
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let gb = Self::unbroadcast(out_shape, self.shape(*b), g, |_, _| sign);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(node.op, Op::Div(..));
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                let xa = self.value(*a).data();
                let xb = self.value(*b).data();
                let ba = broadcast_strides(&sa, out_shape);
                let bb = broadcast_strides(&sb, out_shape);
                let want_a = self.requires_grad(*a);
                let want_b = self.requires_grad(*b);
                let mut ga = vec![0.0; if want_a { xa.len() } else { 0 }];
                let mut gb = vec![0.0; if want_b { xb.len() } else { 0 }];
                let y = node.value.data();
                for_each_broadcast(out_shape, &ba, &bb, |o, ia, ib| {
                    let go = g[o];
                    if is_div {
                        if want_a {
                            ga[ia] += go / xb[ib];
                        }
                        if want_b {
                            gb[ib] -= go * y[o] / xb[ib];
                        }
                    } else {
                        if want_a {
                            ga[ia] += go * xb[ib];
                        }
                        if want_b {
                            gb[ib] += go * xa[ia];
                        }
                    }
                });
                if want_a {
                    self.accumulate(grads, *a, ga);
                }
                if want_b {
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.accumulate(grads, *x, g.iter().map(|v| v * s).collect());
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                self.accumulate(grads, *x, g.to_vec());
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0] / n.max(1) as f64; n]);
            }
            Op::SumAxis { x, axis } => {
                let shape = self.shape(*x);
                let (outer, len, inner) = kernels::axis_split(shape, *axis);
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for j in 0..len {
                        gx[(o * len + j) * inner..(o * len + j + 1) * inner]
                            .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                b_shared,
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let xa = self.value(*a).data();
                let xb = self.value(*b).data();
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; xa.len()];
                    for bi in 0..batch {
                        let bb = if *b_shared { xb } else { &xb[bi * k * n..(bi + 1) * k * n] };
                        kernels::gemm(m, n, k, &g[bi * m * n..(bi + 1) * m * n], false, bb, true, &mut ga[bi * m * k..(bi + 1) * m * k], 0.0);
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; xb.len()];
                    for bi in 0..batch {
                        let dst = if *b_shared { &mut gb[..] } else { &mut gb[bi * k * n..(bi + 1) * k * n] };
                        kernels::gemm(k, m, n, &xa[bi * m * k..(bi + 1) * m * k], true, &g[bi * m * n..(bi + 1) * m * n], false, dst, 1.0);
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Permute { x, perm } => {
                let index = permute_index(self.shape(*x), perm);
                let mut gx = vec![0.0; g.len()];
                for (o, &src) in index.iter().enumerate() {
                    gx[src] = g[o];
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Gather { x, index } => {
                let mut gx = vec![0.0; self.value(*x).numel()];
                for (o, &src) in index.iter().enumerate() {
                    gx[src] += g[o];
                }
                self.accumulate(grads, *x, gx);
            }
            Op::GatherRows { x, rows } => {
                let mut gx = vec![0.0; self.value(*x).numel()];
                let width = g.len() / rows.len().max(1);
                for (o, &src) in rows.iter().enumerate() {
                    let dst = &mut gx[src * width..(src + 1) * width];
                    for (d, v) in dst.iter_mut().zip(&g[o * width..(o + 1) * width]) {
                        *d += v;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Concat { parts, axis } => {
                let total = out_shape[*axis];
                let (outer, _, inner) = kernels::axis_split(out_shape, *axis);
                let mut start = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.requires_grad(p) {
                        let mut gp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + start) * inner;
                            gp.extend_from_slice(&g[base..base + len * inner]);
                        }
                        self.accumulate(grads, p, gp);
                    }
                    start += len;
                }
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                self.accumulate(grads, *x, g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect());
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x).data();
                self.accumulate(
                    grads,
                    *x,
                    g.iter().zip(xv).map(|(g, &v)| if v > 0.0 { *g } else { g * slope }).collect(),
                );
            }
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                self.accumulate(
                    grads,
                    *x,
                    g.iter().zip(xv).map(|(g, &v)| if v > 0.0 { *g } else if v < 0.0 { -g } else { 0.0 }).collect(),
                );
            }
            Op::Exp(x) => {
                let y = node.value.data();
                self.accumulate(grads, *x, g.iter().zip(y).map(|(g, y)| g * y).collect());
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = kernels::axis_split(out_shape, *axis);
                let gx = kernels::softmax_backward(node.value.data(), g, outer, len, inner);
                self.accumulate(grads, *x, gx);
            }
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv2d_backward(geom, self.value(*x).data(), self.value(*w).data(), g);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
                if let Some(b) = b {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Conv3d { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv3d_backward(geom, self.value(*x).data(), self.value(*w).data(), g);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
                if let Some(b) = b {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::AffineGrid { theta, h, w } => {
                let batch = self.shape(*theta)[0];
                let mut gt = vec![0.0; batch * 6];
                for bi in 0..batch {
                    for y in 0..*h {
                        let yn = kernels::normalize(y as f64, *h);
                        for x in 0..*w {
                            let xn = kernels::normalize(x as f64, *w);
                            let o = ((bi * h + y) * w + x) * 2;
                            let (gx, gy) = (g[o], g[o + 1]);
                            let t = &mut gt[bi * 6..bi * 6 + 6];
                            t[0] += gx * xn;
                            t[1] += gx * yn;
                            t[2] += gx;
                            t[3] += gy * xn;
                            t[4] += gy * yn;
                            t[5] += gy;
                        }
                    }
                }
                self.accumulate(grads, *theta, gt);
            }
            Op::GridSample { src, grid, geom, src_of } => {
                let want_grid = self.requires_grad(*grid);
                let (ds, dg) = kernels::grid_sample_backward(
                    geom,
                    self.value(*src).data(),
                    self.value(*grid).data(),
                    g,
                    src_of.as_ref().map(|m| m.as_slice()),
                    want_grid,
                );
                self.accumulate(grads, *src, ds);
                if want_grid {
                    self.accumulate(grads, *grid, dg);
                }
            }
            Op::SpectralNorm { w, u, v, sigma } => {
                let wv = self.value(*w).data();
                let cols = v.len();
                let inner: f64 = g.iter().zip(wv).map(|(a, b)| a * b).sum();
                let c = inner / (sigma * sigma);
                let gw = g
                    .iter()
                    .enumerate()
                    .map(|(idx, gv)| gv / sigma - c * u[idx / cols] * v[idx % cols])
                    .collect();
                self.accumulate(grads, *w, gw);
            }
        }
    }
}

/// For each output offset of a permutation, the source offset.
fn permute_index(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides_of(shape);
    let oshape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let ostr: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n: usize = shape.iter().product();
    let mut index = Vec::with_capacity(n);
    let r = oshape.len();
    if r == 0 {
        return vec![0];
    }
    let mut idx = vec![0usize; r];
    let mut off = 0usize;
    for _ in 0..n {
        index.push(off);
        for ax in (0..r).rev() {
            idx[ax] += 1;
            off += ostr[ax];
            if idx[ax] < oshape[ax] {
                break;
            }
            off -= ostr[ax] * oshape[ax];
            idx[ax] = 0;
        }
    }
    index
}
