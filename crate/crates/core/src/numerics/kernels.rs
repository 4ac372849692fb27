//! Forward and backward kernels on raw row-major buffers.
//!
//! Every kernel here is shape-checked by its caller in `graph.rs`; these
//! functions assume consistent dimensions.

/// `c = a(m×k) · b(k×n)` with optional transposes, accumulating into `c` when `beta == 1`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the strides above address exactly the m×k, k×n and m×n row-major
    // (or transposed) buffers whose lengths are asserted.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn multiplies(&self) -> u64 {
        (self.batch * self.c_out * self.out_h() * self.out_w() * self.col_rows()) as u64
    }
}

fn im2col(g: &Conv2dGeom, x: &[f64], cols: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let npix = oh * ow;
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * npix..(row + 1) * npix];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.h as isize {
                        drow.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &Conv2dGeom, cols: &[f64], dx: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let npix = oh * ow;
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * npix..(row + 1) * npix];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(g: &Conv2dGeom, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let npix = oh * ow;
    let rows = g.col_rows();
    let in_sz = g.c_in * g.h * g.w;
    let out_sz = g.c_out * npix;
    let mut out = vec![0.0; g.batch * out_sz];
    let mut cols = vec![0.0; rows * npix];
    for b in 0..g.batch {
        im2col(g, &x[b * in_sz..(b + 1) * in_sz], &mut cols);
        let o = &mut out[b * out_sz..(b + 1) * out_sz];
        if let Some(bias) = bias {
            for (oc, chunk) in o.chunks_mut(npix).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bias[oc]);
            }
            gemm(g.c_out, rows, npix, w, false, &cols, false, o, 1.0);
        } else {
            gemm(g.c_out, rows, npix, w, false, &cols, false, o, 0.0);
        }
    }
    out
}

/// Returns `(dx, dw, dbias)`.
pub fn conv2d_backward(
    g: &Conv2dGeom,
    x: &[f64],
    w: &[f64],
    dout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let npix = oh * ow;
    let rows = g.col_rows();
    let in_sz = g.c_in * g.h * g.w;
    let out_sz = g.c_out * npix;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; g.c_out];
    let mut cols = vec![0.0; rows * npix];
    let mut dcols = vec![0.0; rows * npix];
    for b in 0..g.batch {
        let go = &dout[b * out_sz..(b + 1) * out_sz];
        for (oc, chunk) in go.chunks(npix).enumerate() {
            db[oc] += chunk.iter().sum::<f64>();
        }
        im2col(g, &x[b * in_sz..(b + 1) * in_sz], &mut cols);
        gemm(g.c_out, npix, rows, go, false, &cols, true, &mut dw, 1.0);
        gemm(rows, g.c_out, npix, w, true, go, false, &mut dcols, 0.0);
        col2im(g, &dcols, &mut dx[b * in_sz..(b + 1) * in_sz]);
    }
    (dx, dw, db)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dGeom {
    pub batch: usize,
    pub c_in: usize,
    pub dims: [usize; 3],
    pub c_out: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl Conv3dGeom {
    pub fn out_dims(&self) -> [usize; 3] {
        let mut o = [0; 3];
        for a in 0..3 {
            o[a] = (self.dims[a] + 2 * self.pad[a] - self.kernel[a]) / self.stride[a] + 1;
        }
        o
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.kernel.iter().product::<usize>()
    }

    pub fn multiplies(&self) -> u64 {
        let o = self.out_dims();
        (self.batch * self.c_out * o.iter().product::<usize>() * self.col_rows()) as u64
    }

    /// Visit `(col_row, out_pixel, in_offset)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let o = self.out_dims();
        let [d, h, w] = self.dims;
        let [kd, kh, kw] = self.kernel;
        let npix = o.iter().product::<usize>();
        let _ = npix;
        for c in 0..self.c_in {
            for zd in 0..kd {
                for zy in 0..kh {
                    for zx in 0..kw {
                        let row = ((c * kd + zd) * kh + zy) * kw + zx;
                        for od in 0..o[0] {
                            let id = (od * self.stride[0] + zd) as isize - self.pad[0] as isize;
                            if id < 0 || id >= d as isize {
                                continue;
                            }
                            for oy in 0..o[1] {
                                let iy =
                                    (oy * self.stride[1] + zy) as isize - self.pad[1] as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for ox in 0..o[2] {
                                    let ix = (ox * self.stride[2] + zx) as isize
                                        - self.pad[2] as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let pix = (od * o[1] + oy) * o[2] + ox;
                                    let off = ((c * d + id as usize) * h + iy as usize) * w
                                        + ix as usize;
                                    f(row, pix, off);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv3d_forward(g: &Conv3dGeom, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let npix: usize = g.out_dims().iter().product();
    let rows = g.col_rows();
    let in_sz = g.c_in * g.dims.iter().product::<usize>();
    let out_sz = g.c_out * npix;
    let mut out = vec![0.0; g.batch * out_sz];
    let mut cols = vec![0.0; rows * npix];
    for b in 0..g.batch {
        cols.iter_mut().for_each(|v| *v = 0.0);
        let xb = &x[b * in_sz..(b + 1) * in_sz];
        g.for_each_tap(|row, pix, off| cols[row * npix + pix] = xb[off]);
        let o = &mut out[b * out_sz..(b + 1) * out_sz];
        if let Some(bias) = bias {
            for (oc, chunk) in o.chunks_mut(npix).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bias[oc]);
            }
            gemm(g.c_out, rows, npix, w, false, &cols, false, o, 1.0);
        } else {
            gemm(g.c_out, rows, npix, w, false, &cols, false, o, 0.0);
        }
    }
    out
}

pub fn conv3d_backward(
    g: &Conv3dGeom,
    x: &[f64],
    w: &[f64],
    dout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let npix: usize = g.out_dims().iter().product();
    let rows = g.col_rows();
    let in_sz = g.c_in * g.dims.iter().product::<usize>();
    let out_sz = g.c_out * npix;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; g.c_out];
    let mut cols = vec![0.0; rows * npix];
    let mut dcols = vec![0.0; rows * npix];
    for b in 0..g.batch {
        let go = &dout[b * out_sz..(b + 1) * out_sz];
        for (oc, chunk) in go.chunks(npix).enumerate() {
            db[oc] += chunk.iter().sum::<f64>();
        }
        cols.iter_mut().for_each(|v| *v = 0.0);
        let xb = &x[b * in_sz..(b + 1) * in_sz];
        g.for_each_tap(|row, pix, off| cols[row * npix + pix] = xb[off]);
        gemm(g.c_out, npix, rows, go, false, &cols, true, &mut dw, 1.0);
        gemm(rows, g.c_out, npix, w, true, go, false, &mut dcols, 0.0);
        let dxb = &mut dx[b * in_sz..(b + 1) * in_sz];
        g.for_each_tap(|row, pix, off| dxb[off] += dcols[row * npix + pix]);
    }
    (dx, dw, db)
}

/// Normalized coordinate to pixel coordinate under the align-corners convention.
#[inline]
pub fn unnormalize(u: f64, size: usize) -> f64 {
    (u + 1.0) * 0.5 * (size as f64 - 1.0)
}

#[inline]
pub fn normalize(p: f64, size: usize) -> f64 {
    if size <= 1 {
        0.0
    } else {
        -1.0 + 2.0 * p / (size as f64 - 1.0)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SampleGeom {
    pub batch: usize,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub out_h: usize,
    pub out_w: usize,
    /// Grid batch is 1 (shared) or `batch`.
    pub grid_shared: bool,
}

struct Taps {
    x0: isize,
    y0: isize,
    wx: f64,
    wy: f64,
}

#[inline]
fn taps(gx: f64, gy: f64, h: usize, w: usize) -> Taps {
    let x = unnormalize(gx, w);
    let y = unnormalize(gy, h);
    let xf = x.floor();
    let yf = y.floor();
    Taps {
        x0: xf as isize,
        y0: yf as isize,
        wx: x - xf,
        wy: y - yf,
    }
}

#[inline]
fn fetch(plane: &[f64], h: usize, w: usize, y: isize, x: isize) -> f64 {
    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
        0.0
    } else {
        plane[y as usize * w + x as usize]
    }
}

/// Output batch `b` samples source batch `src_of[b]` (or `b`) on grid `b` (or the shared grid).
pub fn grid_sample_forward(g: &SampleGeom, src: &[f64], grid: &[f64], src_of: Option<&[usize]>) -> Vec<f64> {
    let npix = g.out_h * g.out_w;
    let plane_sz = g.h * g.w;
    let mut out = vec![0.0; g.batch * g.channels * npix];
    for b in 0..g.batch {
        let gb = if g.grid_shared { 0 } else { b };
        let sb = src_of.map_or(b, |m| m[b]);
        let grid_b = &grid[gb * npix * 2..(gb + 1) * npix * 2];
        for p in 0..npix {
            let t = taps(grid_b[2 * p], grid_b[2 * p + 1], g.h, g.w);
            let w00 = (1.0 - t.wx) * (1.0 - t.wy);
            let w01 = t.wx * (1.0 - t.wy);
            let w10 = (1.0 - t.wx) * t.wy;
            let w11 = t.wx * t.wy;
            for c in 0..g.channels {
                let plane = &src[(sb * g.channels + c) * plane_sz..][..plane_sz];
                let v = w00 * fetch(plane, g.h, g.w, t.y0, t.x0)
                    + w01 * fetch(plane, g.h, g.w, t.y0, t.x0 + 1)
                    + w10 * fetch(plane, g.h, g.w, t.y0 + 1, t.x0)
                    + w11 * fetch(plane, g.h, g.w, t.y0 + 1, t.x0 + 1);
                out[(b * g.channels + c) * npix + p] = v;
            }
        }
    }
    out
}

/// Returns `(dsrc, dgrid)`; `dgrid` has the grid's (possibly shared) batch.
pub fn grid_sample_backward(
    g: &SampleGeom,
    src: &[f64],
    grid: &[f64],
    dout: &[f64],
    src_of: Option<&[usize]>,
    want_grid: bool,
) -> (Vec<f64>, Vec<f64>) {
    let npix = g.out_h * g.out_w;
    let plane_sz = g.h * g.w;
    let mut dsrc = vec![0.0; src.len()];
    let mut dgrid = vec![0.0; if want_grid { grid.len() } else { 0 }];
    let sx = 0.5 * (g.w as f64 - 1.0);
    let sy = 0.5 * (g.h as f64 - 1.0);
    let add = |d: &mut [f64], y: isize, x: isize, v: f64| {
        if y >= 0 && x >= 0 && y < g.h as isize && x < g.w as isize {
            d[y as usize * g.w + x as usize] += v;
        }
    };
    for b in 0..g.batch {
        let gb = if g.grid_shared { 0 } else { b };
        let sb = src_of.map_or(b, |m| m[b]);
        let grid_off = gb * npix * 2;
        for p in 0..npix {
            let t = taps(grid[grid_off + 2 * p], grid[grid_off + 2 * p + 1], g.h, g.w);
            let (mut gx, mut gy) = (0.0, 0.0);
            for c in 0..g.channels {
                let go = dout[(b * g.channels + c) * npix + p];
                if go == 0.0 {
                    continue;
                }
                let base = (sb * g.channels + c) * plane_sz;
                let dplane = &mut dsrc[base..base + plane_sz];
                add(dplane, t.y0, t.x0, go * (1.0 - t.wx) * (1.0 - t.wy));
                add(dplane, t.y0, t.x0 + 1, go * t.wx * (1.0 - t.wy));
                add(dplane, t.y0 + 1, t.x0, go * (1.0 - t.wx) * t.wy);
                add(dplane, t.y0 + 1, t.x0 + 1, go * t.wx * t.wy);
                if want_grid {
                    let plane = &src[base..base + plane_sz];
                    let v00 = fetch(plane, g.h, g.w, t.y0, t.x0);
                    let v01 = fetch(plane, g.h, g.w, t.y0, t.x0 + 1);
                    let v10 = fetch(plane, g.h, g.w, t.y0 + 1, t.x0);
                    let v11 = fetch(plane, g.h, g.w, t.y0 + 1, t.x0 + 1);
                    gx += go * ((v01 - v00) * (1.0 - t.wy) + (v11 - v10) * t.wy);
                    gy += go * ((v10 - v00) * (1.0 - t.wx) + (v11 - v01) * t.wx);
                }
            }
            if want_grid {
                dgrid[grid_off + 2 * p] += gx * sx;
                dgrid[grid_off + 2 * p + 1] += gy * sy;
            }
        }
    }
    (dsrc, dgrid)
}

/// `(outer, len, inner)` decomposition of a shape around `axis`.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax_forward(x: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let mut m = f64::NEG_INFINITY;
            for j in 0..len {
                m = m.max(x[at(j)]);
            }
            let mut s = 0.0;
            for j in 0..len {
                let e = (x[at(j)] - m).exp();
                out[at(j)] = e;
                s += e;
            }
            for j in 0..len {
                out[at(j)] /= s;
            }
        }
    }
    out
}

pub fn softmax_backward(y: &[f64], dy: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let dot: f64 = (0..len).map(|j| y[at(j)] * dy[at(j)]).sum();
            for j in 0..len {
                dx[at(j)] = y[at(j)] * (dy[at(j)] - dot);
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(g: &Conv2dGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; g.batch * g.c_out * oh * ow];
        for n in 0..g.batch {
            for o in 0..g.c_out {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut s = b[o];
                        for c in 0..g.c_in {
                            for ky in 0..g.kh {
                                for kx in 0..g.kw {
                                    let iy = (y * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (xo * g.stride + kx) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize
                                    {
                                        continue;
                                    }
                                    s += w[((o * g.c_in + c) * g.kh + ky) * g.kw + kx]
                                        * x[((n * g.c_in + c) * g.h + iy as usize) * g.w
                                            + ix as usize];
                                }
                            }
                        }
                        out[((n * g.c_out + o) * oh + y) * ow + xo] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_direct_summation() {
        let g = Conv2dGeom {
            batch: 2,
            c_in: 3,
            h: 7,
            w: 6,
            c_out: 4,
            kh: 3,
            kw: 3,
            stride: 2,
            pad: 1,
        };
        let x: Vec<f64> = (0..2 * 3 * 7 * 6).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let w: Vec<f64> = (0..4 * 3 * 9).map(|i| ((i * 13) % 7) as f64 * 0.1 - 0.3).collect();
        let b = [0.5, -1.0, 0.0, 2.0];
        let fast = conv2d_forward(&g, &x, &w, Some(&b));
        let slow = naive_conv(&g, &x, &w, &b);
        for (a, e) in fast.iter().zip(&slow) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn conv3d_with_unit_depth_kernel_matches_conv2d() {
        let g2 = Conv2dGeom {
            batch: 1,
            c_in: 2,
            h: 5,
            w: 5,
            c_out: 3,
            kh: 3,
            kw: 3,
            stride: 2,
            pad: 1,
        };
        let g3 = Conv3dGeom {
            batch: 1,
            c_in: 2,
            dims: [1, 5, 5],
            c_out: 3,
            kernel: [1, 3, 3],
            stride: [1, 2, 2],
            pad: [0, 1, 1],
        };
        let x: Vec<f64> = (0..50).map(|i| (i as f64).sin()).collect();
        let w: Vec<f64> = (0..54).map(|i| (i as f64 * 0.7).cos()).collect();
        let a = conv2d_forward(&g2, &x, &w, None);
        let b = conv3d_forward(&g3, &x, &w, None);
        assert_eq!(a.len(), b.len());
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, true, &b, false, &mut c, 0.0);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, 0.0);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }
}
