//! Dense row-major `f64` tensors and the numeric kernels shared by the
//! differentiable graph and the inference paths.

use std::fmt;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.data.len(),
            "cannot reshape {:?} to {shape:?}",
            self.shape
        );
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Row and column strides of a matrix operand, so transposed views can be
/// passed to the GEMM without copying.
#[derive(Clone, Copy, Debug)]
pub struct MatView {
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl MatView {
    pub fn row_major(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    pub fn strided(rows: usize, cols: usize, row_stride: usize) -> Self {
        Self {
            rows,
            cols,
            row_stride: row_stride as isize,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }
}

/// `c = beta * c + a · b` over strided views.
pub fn gemm(a: &[f64], av: MatView, b: &[f64], bv: MatView, c: &mut [f64], cv: MatView, beta: f64) {
    assert_eq!(av.cols, bv.rows, "gemm inner dimension");
    assert_eq!(av.rows, cv.rows, "gemm output rows");
    assert_eq!(bv.cols, cv.cols, "gemm output cols");
    if cv.rows == 0 || cv.cols == 0 {
        return;
    }
    if av.cols == 0 {
        for r in 0..cv.rows {
            for col in 0..cv.cols {
                let i = r as isize * cv.row_stride + col as isize * cv.col_stride;
                c[i as usize] *= beta;
            }
        }
        return;
    }
    check_extent(a.len(), av);
    check_extent(b.len(), bv);
    check_extent(c.len(), cv);
    // SAFETY: extents were checked against the slice lengths above and the
    // output view never aliases the inputs (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            av.rows,
            av.cols,
            bv.cols,
            1.0,
            a.as_ptr(),
            av.row_stride,
            av.col_stride,
            b.as_ptr(),
            bv.row_stride,
            bv.col_stride,
            beta,
            c.as_mut_ptr(),
            cv.row_stride,
            cv.col_stride,
        );
    }
}

fn check_extent(len: usize, v: MatView) {
    assert!(v.row_stride >= 0 && v.col_stride >= 0);
    let last = (v.rows - 1) as isize * v.row_stride + (v.cols - 1) as isize * v.col_stride;
    assert!((last as usize) < len, "matrix view exceeds buffer");
}

/// Plain row-major matrix product `[m,k] · [k,n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm(
        a,
        MatView::row_major(m, k),
        b,
        MatView::row_major(k, n),
        &mut out,
        MatView::row_major(m, n),
        0.0,
    );
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// In-place numerically stable softmax over one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `x[rows, width] · w[width, out] + b`.
pub fn linear_forward(x: &[f64], w: &[f64], b: &[f64], rows: usize, width: usize, out: usize) -> Vec<f64> {
    let mut y = Vec::with_capacity(rows * out);
    for _ in 0..rows {
        y.extend_from_slice(b);
    }
    gemm(
        x,
        MatView::row_major(rows, width),
        w,
        MatView::row_major(width, out),
        &mut y,
        MatView::row_major(rows, out),
        1.0,
    );
    y
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Layer norm over the last axis; returns normalized values and the
/// per-row reciprocal standard deviations.
pub fn layer_norm_forward(x: &[f64], gamma: &[f64], beta: &[f64], width: usize) -> (Vec<f64>, Vec<f64>) {
    let rows = x.len() / width;
    let mut y = vec![0.0; x.len()];
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * width..(r + 1) * width];
        let mean = row.iter().sum::<f64>() / width as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
        let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        rstd.push(rs);
        let out = &mut y[r * width..(r + 1) * width];
        for i in 0..width {
            out[i] = (row[i] - mean) * rs * gamma[i] + beta[i];
        }
    }
    (y, rstd)
}

/// Geometry of a 2D convolution over one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(c_in: usize, h: usize, w: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        Some(Self {
            c_in,
            h,
            w,
            c_out,
            kh: k,
            kw: k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_area(&self) -> usize {
        self.oh * self.ow
    }

    fn in_size(&self) -> usize {
        self.c_in * self.h * self.w
    }

    fn out_size(&self) -> usize {
        self.c_out * self.oh * self.ow
    }
}

/// Output columns `ox` whose input column `ox·stride + k − pad` lies inside
/// `0..w`.
fn valid_range(out: usize, w: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // ox·stride + k ≥ pad  and  ox·stride + k − pad < w
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if w + pad <= k { 0 } else { (w + pad - k).div_ceil(stride).min(out) };
    (lo, hi.max(lo))
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let area = g.out_area();
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * area..(row + 1) * area];
                let (lo, hi) = valid_range(g.ow, g.w, kx, g.stride, g.pad);
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    let base = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[base..base + (hi - lo)]);
                    } else {
                        for (i, v) in line[lo..hi].iter_mut().enumerate() {
                            *v = src[base + i * g.stride];
                        }
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, gx: &mut [f64]) {
    let area = g.out_area();
    for c in 0..g.c_in {
        let plane = &mut gx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * area..(row + 1) * area];
                let (lo, hi) = valid_range(g.ow, g.w, kx, g.stride, g.pad);
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let line = &src[oy * g.ow + lo..oy * g.ow + hi];
                    let base = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        for (d, v) in dst[base..base + line.len()].iter_mut().zip(line) {
                            *d += v;
                        }
                    } else {
                        for (i, v) in line.iter().enumerate() {
                            dst[base + i * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Stride-1 convolutions skip `im2col` and run over zero-padded planes.
fn use_direct(g: &ConvGeom) -> bool {
    g.stride == 1 && g.pad < g.kh && g.c_in * g.c_out <= DIRECT_MAX_CHANNELS
}

const DIRECT_MAX_CHANNELS: usize = 32;

fn pad_planes(x: &[f64], c: usize, h: usize, w: usize, p: usize) -> Vec<f64> {
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut out = vec![0.0; c * hp * wp];
    for ci in 0..c {
        for y in 0..h {
            let dst = (ci * hp + y + p) * wp + p;
            out[dst..dst + w].copy_from_slice(&x[(ci * h + y) * w..(ci * h + y + 1) * w]);
        }
    }
    out
}

/// `y[o] += Σ_c w[o, c] ⋆ xp[c]` for a padded input of `c_in` planes of
/// `hp × wp`.
fn direct_correlate(xp: &[f64], hp: usize, wp: usize, w: &[f64], c_in: usize, c_out: usize, k: usize, y: &mut [f64]) {
    let (oh, ow) = (hp + 1 - k, wp + 1 - k);
    for o in 0..c_out {
        let yo = &mut y[o * oh * ow..(o + 1) * oh * ow];
        for c in 0..c_in {
            for ky in 0..k {
                let wr = &w[((o * c_in + c) * k + ky) * k..((o * c_in + c) * k + ky + 1) * k];
                for oy in 0..oh {
                    let src = &xp[(c * hp + oy + ky) * wp..(c * hp + oy + ky + 1) * wp];
                    let dst = &mut yo[oy * ow..(oy + 1) * ow];
                    if k == 3 {
                        let (w0, w1, w2) = (wr[0], wr[1], wr[2]);
                        for (((d, a), b), c) in dst.iter_mut().zip(&src[..ow]).zip(&src[1..ow + 1]).zip(&src[2..ow + 2]) {
                            *d += w0 * a + w1 * b + w2 * c;
                        }
                    } else {
                        for (kx, &wv) in wr.iter().enumerate() {
                            for (d, s) in dst.iter_mut().zip(&src[kx..kx + ow]) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn direct_forward(x: &[f64], w: &[f64], g: &ConvGeom, y: &mut [f64]) {
    let xp = pad_planes(x, g.c_in, g.h, g.w, g.pad);
    direct_correlate(&xp, g.h + 2 * g.pad, g.w + 2 * g.pad, w, g.c_in, g.c_out, g.kh, y);
}

fn direct_backward(x: &[f64], w: &[f64], go: &[f64], g: &ConvGeom, gx: Option<&mut [f64]>, gw: Option<&mut [f64]>) {
    let k = g.kh;
    if let Some(gw) = gw {
        let (hp, wp) = (g.h + 2 * g.pad, g.w + 2 * g.pad);
        let xp = pad_planes(x, g.c_in, g.h, g.w, g.pad);
        for o in 0..g.c_out {
            let gplane = &go[o * g.out_area()..(o + 1) * g.out_area()];
            for c in 0..g.c_in {
                for ky in 0..k {
                    for kx in 0..k {
                        let mut acc = 0.0;
                        for oy in 0..g.oh {
                            let row = (c * hp + oy + ky) * wp + kx;
                            acc += dot(&gplane[oy * g.ow..(oy + 1) * g.ow], &xp[row..row + g.ow]);
                        }
                        gw[((o * g.c_in + c) * k + ky) * k + kx] += acc;
                    }
                }
            }
        }
    }
    if let Some(gx) = gx {
        // correlate the padded output gradient with the flipped, transposed kernel
        let p = k - 1 - g.pad;
        let gp = pad_planes(go, g.c_out, g.oh, g.ow, p);
        let mut wt = vec![0.0; w.len()];
        for o in 0..g.c_out {
            for c in 0..g.c_in {
                for ky in 0..k {
                    for kx in 0..k {
                        wt[((c * g.c_out + o) * k + k - 1 - ky) * k + k - 1 - kx] = w[((o * g.c_in + c) * k + ky) * k + kx];
                    }
                }
            }
        }
        direct_correlate(&gp, g.oh + 2 * p, g.ow + 2 * p, &wt, g.c_out, g.c_in, k, gx);
    }
}

/// Batched convolution: `x[B, Cin, H, W]`, `w[Cout, Cin, k, k]`, `b[Cout]`.
pub fn conv2d_forward(x: &[f64], w: &[f64], b: &[f64], batch: usize, g: &ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0; batch * g.out_size()];
    let mut cols = vec![0.0; g.patch() * g.out_area()];
    for n in 0..batch {
        im2col(&x[n * g.in_size()..(n + 1) * g.in_size()], g, &mut cols);
        let y = &mut out[n * g.out_size()..(n + 1) * g.out_size()];
        for (o, chunk) in y.chunks_mut(g.out_area()).enumerate() {
            chunk.fill(b[o]);
        }
        if use_direct(g) {
            direct_forward(&x[n * g.in_size()..(n + 1) * g.in_size()], w, g, y);
            continue;
        }
        gemm(
            w,
            MatView::row_major(g.c_out, g.patch()),
            &cols,
            MatView::row_major(g.patch(), g.out_area()),
            y,
            MatView::row_major(g.c_out, g.out_area()),
            1.0,
        );
    }
    out
}

/// Gradients of a batched convolution. Each requested gradient buffer is
/// accumulated into.
pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    batch: usize,
    g: &ConvGeom,
    mut gx: Option<&mut [f64]>,
    mut gw: Option<&mut [f64]>,
    mut gb: Option<&mut [f64]>,
) {
    let mut cols = vec![0.0; g.patch() * g.out_area()];
    for n in 0..batch {
        let go = &gout[n * g.out_size()..(n + 1) * g.out_size()];
        if let Some(gb) = gb.as_deref_mut() {
            for (o, chunk) in go.chunks(g.out_area()).enumerate() {
                gb[o] += chunk.iter().sum::<f64>();
            }
        }
        if use_direct(g) {
            let xs = &x[n * g.in_size()..(n + 1) * g.in_size()];
            let gxs = gx.as_deref_mut().map(|gx| &mut gx[n * g.in_size()..(n + 1) * g.in_size()]);
            direct_backward(xs, w, go, g, gxs, gw.as_deref_mut());
            continue;
        }
        if let Some(gw) = gw.as_deref_mut() {
            im2col(&x[n * g.in_size()..(n + 1) * g.in_size()], g, &mut cols);
            gemm(
                go,
                MatView::row_major(g.c_out, g.out_area()),
                &cols,
                MatView::row_major(g.patch(), g.out_area()).t(),
                gw,
                MatView::row_major(g.c_out, g.patch()),
                1.0,
            );
        }
        if let Some(gx) = gx.as_deref_mut() {
            gemm(
                w,
                MatView::row_major(g.c_out, g.patch()).t(),
                go,
                MatView::row_major(g.c_out, g.out_area()),
                &mut cols,
                MatView::row_major(g.patch(), g.out_area()),
                0.0,
            );
            col2im(&cols, g, &mut gx[n * g.in_size()..(n + 1) * g.in_size()]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv_reference(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut out = vec![0.0; g.c_out * g.oh * g.ow];
        for o in 0..g.c_out {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut acc = b[o];
                    for c in 0..g.c_in {
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                    acc += w[((o * g.c_in + c) * g.kh + ky) * g.kw + kx]
                                        * x[(c * g.h + iy as usize) * g.w + ix as usize];
                                }
                            }
                        }
                    }
                    out[(o * g.oh + oy) * g.ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        for (c_in, c_out, k, stride, pad) in [(3, 4, 3, 2, 1), (3, 4, 3, 1, 1), (8, 8, 3, 1, 1), (2, 3, 5, 1, 2), (2, 2, 2, 1, 0)] {
            let g = ConvGeom::new(c_in, 7, 9, c_out, k, stride, pad).unwrap();
            let x: Vec<f64> = (0..g.in_size()).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
            let w: Vec<f64> = (0..g.c_out * g.patch()).map(|i| ((i * 13) % 7) as f64 * 0.1).collect();
            let b: Vec<f64> = (0..c_out).map(|o| o as f64 * 0.5 - 0.5).collect();
            let fast = conv2d_forward(&x, &w, &b, 1, &g);
            let slow = conv_reference(&x, &w, &b, &g);
            assert_eq!(fast.len(), slow.len());
            for (a, e) in fast.iter().zip(&slow) {
                assert!((a - e).abs() < 1e-12);
            }
        }
        assert_eq!(ConvGeom::new(3, 7, 9, 4, 3, 2, 1).map(|g| (g.oh, g.ow)), Some((4, 5)));
    }

    #[test]
    fn gemm_transposed_views() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let mut c = vec![0.0; 9];
        // aᵀ · a : 3x3
        gemm(
            &a,
            MatView::row_major(2, 3).t(),
            &a,
            MatView::row_major(2, 3),
            &mut c,
            MatView::row_major(3, 3),
            0.0,
        );
        assert_eq!(c, vec![17.0, 22.0, 27.0, 22.0, 29.0, 36.0, 27.0, 36.0, 45.0]);
    }

    #[test]
    fn stable_scalar_functions() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert_eq!(softplus(-800.0), 0.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
        let mut row = [1000.0, 1000.0];
        softmax_in_place(&mut row);
        assert_eq!(row, [0.5, 0.5]);
    }
}
