//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation evaluates its forward value eagerly and records enough
//! to run its vector-Jacobian product later. Nodes are appended in
//! topological order, so [`Graph::backward`] is a single reverse sweep.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use crate::tensor::{self, conv2d_backward, conv2d_forward, gemm, ConvGeom, MatView, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// `-ln(1e-12)`: ceiling applied to every log-likelihood term.
pub const LOG_CLAMP: f64 = 27.631_021_115_928_547;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnMask {
    Full,
    /// Query `i` may attend to key `j` iff `j <= i`.
    Causal,
}

impl AttnMask {
    pub fn allows(self, query: usize, key: usize) -> bool {
        match self {
            AttnMask::Full => true,
            AttnMask::Causal => key <= query,
        }
    }
}

enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBroadcast(Var, Var),
    Abs(Var),
    Square(Var),
    Silu(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    Upsample2x(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    ToTokens(Var),
    FromTokens(Var),
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
    ConcatSeq(Var, Var),
    SliceSeq {
        x: Var,
        start: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    StraightThrough {
        encoded: Var,
    },
    BceWithLogits {
        x: Var,
        target_real: bool,
    },
    GlobalAvgPool(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    frozen: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for `v`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    /// Gradients for every parameter that was read onto the graph.
    pub fn param_grads(&self) -> Vec<(ParamId, &Tensor)> {
        self.params
            .iter()
            .filter_map(|&(id, v)| self.grads[v.0].as_ref().map(|g| (id, g)))
            .collect()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose parameter reads are constants (no gradient bookkeeping).
    pub fn inference() -> Self {
        Self {
            frozen: true,
            ..Self::default()
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input; no gradient is tracked.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// An input whose gradient is tracked (used by gradient checks).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Reads a parameter onto the graph. Repeated reads share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let frozen = self.frozen || store.is_frozen(id);
        let v = self.push(store.get(id).clone(), Op::Param, !frozen);
        self.params.insert(id, v);
        v
    }

    /// Identity in the forward pass, zero gradient in the backward pass.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.constant(t)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise operands differ in shape");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, c), ng)
    }

    /// `a[..., rest] + b[rest]`, broadcasting `b` over the leading axes.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let inner = tb.numel();
        assert!(
            ta.shape().ends_with(tb.shape()),
            "broadcast operand {:?} is not a suffix of {:?}",
            tb.shape(),
            ta.shape()
        );
        let mut out = ta.clone();
        for chunk in out.data_mut().chunks_mut(inner) {
            for (o, v) in chunk.iter_mut().zip(tb.data()) {
                *o += v;
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::AddBroadcast(a, b), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::abs);
        let ng = self.ng(a);
        self.push(t, Op::Abs(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x * x);
        let ng = self.ng(a);
        self.push(t, Op::Square(a), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(tensor::silu);
        let ng = self.ng(a);
        self.push(t, Op::Silu(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(t, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor::scalar(ta.sum() / ta.numel() as f64);
        let ng = self.ng(a);
        self.push(t, Op::Mean(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a).clone().reshape(shape);
        let ng = self.ng(a);
        self.push(t, Op::Reshape(a), ng)
    }

    /// `x[B, Cin, H, W]` convolved with `w[Cout, Cin, k, k]` plus bias `b[Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (tx, tw) = (self.value(x), self.value(w));
        let (xs, ws) = (tx.shape(), tw.shape());
        assert_eq!(xs.len(), 4, "conv2d input must be [B, C, H, W]");
        assert_eq!(ws.len(), 4, "conv2d weight must be [O, C, k, k]");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
        assert_eq!(ws[2], ws[3], "conv2d kernel must be square");
        let geom = ConvGeom::new(xs[1], xs[2], xs[3], ws[0], ws[2], stride, pad)
            .unwrap_or_else(|| panic!("conv2d kernel {} does not fit input {xs:?}", ws[2]));
        let batch = xs[0];
        let out = conv2d_forward(tx.data(), tw.data(), self.value(b).data(), batch, &geom);
        let t = Tensor::new(vec![batch, geom.c_out, geom.oh, geom.ow], out);
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(t, Op::Conv2d { x, w, b, geom }, ng)
    }

    /// Nearest-neighbour 2× upsampling of `[B, C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let s = tx.shape();
        let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
        let mut out = vec![0.0; bc * 4 * h * w];
        for p in 0..bc {
            let src = &tx.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let t = Tensor::new(vec![s[0], s[1], 2 * h, 2 * w], out);
        let ng = self.ng(x);
        self.push(t, Op::Upsample2x(x), ng)
    }

    /// `x[..., in] · w[in, out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (tx, tw) = (self.value(x), self.value(w));
        let (inp, outp) = (tw.shape()[0], tw.shape()[1]);
        assert_eq!(*tx.shape().last().unwrap(), inp, "linear input width");
        let rows = tx.numel() / inp;
        let y = tensor::linear_forward(tx.data(), tw.data(), self.value(b).data(), rows, inp, outp);
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = outp;
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(Tensor::new(shape, y), Op::Linear { x, w, b }, ng)
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let tx = self.value(x);
        let width = *tx.shape().last().unwrap();
        let (y, rstd) =
            tensor::layer_norm_forward(tx.data(), self.value(gamma).data(), self.value(beta).data(), width);
        let t = Tensor::new(tx.shape().to_vec(), y);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(t, Op::LayerNorm { x, gamma, beta, rstd }, ng)
    }

    /// Multi-head scaled dot-product attention over `q, k, v` of shape
    /// `[B, L, W]`; heads split the last axis into contiguous slices.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: AttnMask) -> Var {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let s = tq.shape().to_vec();
        assert_eq!(s.len(), 3, "attention operands must be [B, L, W]");
        assert!(tk.shape() == s.as_slice() && tv.shape() == s.as_slice());
        let (batch, len, width) = (s[0], s[1], s[2]);
        assert_eq!(width % heads, 0, "width not divisible by heads");
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; batch * heads * len * len];
        let mut out = vec![0.0; batch * len * width];
        for bi in 0..batch {
            let off = bi * len * width;
            for h in 0..heads {
                let col = off + h * dh;
                let p = &mut probs[(bi * heads + h) * len * len..(bi * heads + h + 1) * len * len];
                gemm(
                    &tq.data()[col..],
                    MatView::strided(len, dh, width),
                    &tk.data()[col..],
                    MatView::strided(len, dh, width).t(),
                    p,
                    MatView::row_major(len, len),
                    0.0,
                );
                for i in 0..len {
                    let row = &mut p[i * len..(i + 1) * len];
                    for (j, val) in row.iter_mut().enumerate() {
                        *val = if mask.allows(i, j) { *val * scale } else { f64::NEG_INFINITY };
                    }
                    tensor::softmax_in_place(row);
                }
                gemm(
                    p,
                    MatView::row_major(len, len),
                    &tv.data()[col..],
                    MatView::strided(len, dh, width),
                    &mut out[col..],
                    MatView::strided(len, dh, width),
                    0.0,
                );
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(Tensor::new(s, out), Op::Attention { q, k, v, heads, probs }, ng)
    }

    /// `[B, C, H, W] -> [B, H·W, C]` with cells in row-major `(h, w)` order.
    pub fn to_tokens(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let s = tx.shape();
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        let mut out = vec![0.0; tx.numel()];
        for n in 0..b {
            for ch in 0..c {
                for p in 0..hw {
                    out[(n * hw + p) * c + ch] = tx.data()[(n * c + ch) * hw + p];
                }
            }
        }
        let t = Tensor::new(vec![b, hw, c], out);
        let ng = self.ng(x);
        self.push(t, Op::ToTokens(x), ng)
    }

    /// Inverse of [`Graph::to_tokens`].
    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Var {
        let tx = self.value(x);
        let s = tx.shape();
        let (b, hw, c) = (s[0], s[1], s[2]);
        assert_eq!(hw, h * w, "token count does not match grid");
        let mut out = vec![0.0; tx.numel()];
        for n in 0..b {
            for p in 0..hw {
                for ch in 0..c {
                    out[(n * c + ch) * hw + p] = tx.data()[(n * hw + p) * c + ch];
                }
            }
        }
        let t = Tensor::new(vec![b, c, h, w], out);
        let ng = self.ng(x);
        self.push(t, Op::FromTokens(x), ng)
    }

    /// Row lookup `table[idx]`, returning `[idx.len(), D]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let tt = self.value(table);
        let d = tt.shape()[1];
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&tt.data()[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(vec![idx.len(), d], out);
        let ng = self.ng(table);
        self.push(
            t,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            ng,
        )
    }

    /// Concatenation of `[B, La, W]` and `[B, Lb, W]` along the sequence axis.
    pub fn concat_seq(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        assert!(sa[0] == sb[0] && sa[2] == sb[2], "concat_seq shape mismatch");
        let (n, la, lb, w) = (sa[0], sa[1], sb[1], sa[2]);
        let mut out = Vec::with_capacity(n * (la + lb) * w);
        for i in 0..n {
            out.extend_from_slice(&ta.data()[i * la * w..(i + 1) * la * w]);
            out.extend_from_slice(&tb.data()[i * lb * w..(i + 1) * lb * w]);
        }
        let t = Tensor::new(vec![n, la + lb, w], out);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::ConcatSeq(a, b), ng)
    }

    /// Positions `start..start+len` of `[B, L, W]`.
    pub fn slice_seq(&mut self, x: Var, start: usize, len: usize) -> Var {
        let tx = self.value(x);
        let s = tx.shape();
        let (n, l, w) = (s[0], s[1], s[2]);
        assert!(start + len <= l, "slice_seq out of range");
        let mut out = Vec::with_capacity(n * len * w);
        for i in 0..n {
            out.extend_from_slice(&tx.data()[(i * l + start) * w..(i * l + start + len) * w]);
        }
        let t = Tensor::new(vec![n, len, w], out);
        let ng = self.ng(x);
        self.push(t, Op::SliceSeq { x, start }, ng)
    }

    /// Mean cross-entropy of `logits[.., K]` rows against integer targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let tl = self.value(logits);
        let k = *tl.shape().last().unwrap();
        let rows = tl.numel() / k;
        assert_eq!(rows, targets.len(), "one target per logit row");
        let mut probs = tl.data().to_vec();
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            assert!(t < k, "target {t} out of range for {k} classes");
            let row = &mut probs[r * k..(r + 1) * k];
            loss += tensor::log_sum_exp(row) - row[t];
            tensor::softmax_in_place(row);
        }
        let t = Tensor::scalar(loss / rows as f64);
        let ng = self.ng(logits);
        self.push(
            t,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        )
    }

    /// Forward value of `quantized`, gradient routed unchanged to `encoded`.
    pub fn straight_through(&mut self, encoded: Var, quantized: Var) -> Var {
        assert_eq!(self.shape(encoded), self.shape(quantized), "straight-through shape mismatch");
        let t = self.value(quantized).clone();
        let ng = self.ng(encoded);
        self.push(t, Op::StraightThrough { encoded }, ng)
    }

    /// Mean of `-ln σ(x)` (real target) or `-ln(1 - σ(x))` (fake target),
    /// each term clamped at [`LOG_CLAMP`].
    pub fn bce_with_logits(&mut self, x: Var, target_real: bool) -> Var {
        let tx = self.value(x);
        let sign = if target_real { -1.0 } else { 1.0 };
        let total: f64 = tx
            .data()
            .iter()
            .map(|&v| tensor::softplus(sign * v).min(LOG_CLAMP))
            .sum();
        let t = Tensor::scalar(total / tx.numel() as f64);
        let ng = self.ng(x);
        self.push(t, Op::BceWithLogits { x, target_real }, ng)
    }

    /// `[B, C, H, W] -> [B, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let s = tx.shape();
        let area = s[2] * s[3];
        let data = tx.data().chunks(area).map(|c| c.iter().sum::<f64>() / area as f64).collect();
        let t = Tensor::new(vec![s[0], s[1]], data);
        let ng = self.ng(x);
        self.push(t, Op::GlobalAvgPool(x), ng)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut params: Vec<(ParamId, Var)> = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        params.sort_by_key(|&(id, _)| id);
        Grads { grads, params }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.ng(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let d = gd.iter().zip(vb.data()).map(|(g, y)| g * y).collect();
                    self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d));
                }
                if self.ng(*b) {
                    let d = gd.iter().zip(va.data()).map(|(g, x)| g * x).collect();
                    self.accumulate(grads, *b, Tensor::new(g.shape().to_vec(), d));
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|v| v * c)),
            Op::AddBroadcast(a, b) => {
                self.accumulate(grads, *a, g.clone());
                let inner = self.value(*b).numel();
                self.accumulate_with(grads, *b, |gb| {
                    for chunk in gd.chunks(inner) {
                        for (o, v) in gb.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                });
            }
            Op::Abs(a) => {
                let d = gd.iter().zip(self.value(*a).data()).map(|(g, x)| g * x.signum()).collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d));
            }
            Op::Square(a) => {
                let d = gd.iter().zip(self.value(*a).data()).map(|(g, x)| 2.0 * g * x).collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d));
            }
            Op::Silu(a) => {
                let d = gd
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(g, &x)| g * tensor::silu_grad(x))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d));
            }
            Op::Sum(a) => {
                let s = gd[0];
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), s));
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel() as f64;
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), gd[0] / n));
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, g.clone().reshape(&shape));
            }
            Op::Conv2d { x, w, b, geom } => {
                let batch = self.shape(*x)[0];
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                let mut gx = self.ng(*x).then(|| vec![0.0; xv.len()]);
                let mut gw = self.ng(*w).then(|| vec![0.0; wv.len()]);
                let mut gb = self.ng(*b).then(|| vec![0.0; geom.c_out]);
                conv2d_backward(xv, wv, gd, batch, geom, gx.as_deref_mut(), gw.as_deref_mut(), gb.as_deref_mut());
                for (v, d) in [(*x, gx), (*w, gw), (*b, gb)] {
                    if let Some(d) = d {
                        let shape = self.shape(v).to_vec();
                        self.accumulate(grads, v, Tensor::new(shape, d));
                    }
                }
            }
            Op::Upsample2x(x) => {
                let s = self.shape(*x).to_vec();
                let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
                let mut d = vec![0.0; bc * h * w];
                for p in 0..bc {
                    let src = &gd[p * 4 * h * w..(p + 1) * 4 * h * w];
                    let dst = &mut d[p * h * w..(p + 1) * h * w];
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(s, d));
            }
            Op::Linear { x, w, b } => {
                let wv = self.value(*w);
                let (inp, outp) = (wv.shape()[0], wv.shape()[1]);
                let xv = self.value(*x);
                let rows = xv.numel() / inp;
                self.accumulate_with(grads, *b, |gb| {
                    for row in gd.chunks(outp) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                });
                self.accumulate_with(grads, *w, |gw| {
                    gemm(
                        xv.data(),
                        MatView::row_major(rows, inp).t(),
                        gd,
                        MatView::row_major(rows, outp),
                        gw,
                        MatView::row_major(inp, outp),
                        1.0,
                    )
                });
                self.accumulate_with(grads, *x, |gx| {
                    gemm(
                        gd,
                        MatView::row_major(rows, outp),
                        wv.data(),
                        MatView::row_major(inp, outp).t(),
                        gx,
                        MatView::row_major(rows, inp),
                        1.0,
                    )
                });
            }
            Op::LayerNorm { x, gamma, beta, rstd } => {
                let xv = self.value(*x).data();
                let gam = self.value(*gamma).data();
                let width = gam.len();
                let rows = xv.len() / width;
                let mut xhat = vec![0.0; xv.len()];
                for r in 0..rows {
                    let row = &xv[r * width..(r + 1) * width];
                    let mean = row.iter().sum::<f64>() / width as f64;
                    for j in 0..width {
                        xhat[r * width + j] = (row[j] - mean) * rstd[r];
                    }
                }
                self.accumulate_with(grads, *beta, |gbeta| {
                    for row in gd.chunks(width) {
                        for (o, v) in gbeta.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                });
                self.accumulate_with(grads, *gamma, |ggam| {
                    for (row, xh) in gd.chunks(width).zip(xhat.chunks(width)) {
                        for j in 0..width {
                            ggam[j] += row[j] * xh[j];
                        }
                    }
                });
                self.accumulate_with(grads, *x, |gx| {
                    for r in 0..rows {
                        let dy = &gd[r * width..(r + 1) * width];
                        let xh = &xhat[r * width..(r + 1) * width];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..width {
                            let dxh = dy[j] * gam[j];
                            m1 += dxh;
                            m2 += dxh * xh[j];
                        }
                        m1 /= width as f64;
                        m2 /= width as f64;
                        for j in 0..width {
                            let dxh = dy[j] * gam[j];
                            gx[r * width + j] += rstd[r] * (dxh - m1 - xh[j] * m2);
                        }
                    }
                });
            }
            Op::Attention { q, k, v, heads, probs } => {
                self.attention_backward(*q, *k, *v, *heads, probs, gd, grads);
            }
            Op::ToTokens(x) => {
                let s = self.shape(*x).to_vec();
                let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
                let mut d = vec![0.0; gd.len()];
                for n in 0..b {
                    for ch in 0..c {
                        for p in 0..hw {
                            d[(n * c + ch) * hw + p] = gd[(n * hw + p) * c + ch];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(s, d));
            }
            Op::FromTokens(x) => {
                let s = self.shape(*x).to_vec();
                let (b, hw, c) = (s[0], s[1], s[2]);
                let mut d = vec![0.0; gd.len()];
                for n in 0..b {
                    for p in 0..hw {
                        for ch in 0..c {
                            d[(n * hw + p) * c + ch] = gd[(n * c + ch) * hw + p];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(s, d));
            }
            Op::GatherRows { table, idx } => {
                let d = self.shape(*table)[1];
                self.accumulate_with(grads, *table, |gt| {
                    for (r, &ix) in idx.iter().enumerate() {
                        for j in 0..d {
                            gt[ix * d + j] += gd[r * d + j];
                        }
                    }
                });
            }
            Op::ConcatSeq(a, b) => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (n, la, lb, w) = (sa[0], sa[1], sb[1], sa[2]);
                let l = la + lb;
                let mut da = Vec::with_capacity(n * la * w);
                let mut db = Vec::with_capacity(n * lb * w);
                for i in 0..n {
                    da.extend_from_slice(&gd[i * l * w..(i * l + la) * w]);
                    db.extend_from_slice(&gd[(i * l + la) * w..(i + 1) * l * w]);
                }
                self.accumulate(grads, *a, Tensor::new(sa, da));
                self.accumulate(grads, *b, Tensor::new(sb, db));
            }
            Op::SliceSeq { x, start } => {
                let s = self.shape(*x).to_vec();
                let (n, l, w) = (s[0], s[1], s[2]);
                let len = g.shape()[1];
                self.accumulate_with(grads, *x, |gx| {
                    for i in 0..n {
                        let dst = &mut gx[(i * l + start) * w..(i * l + start + len) * w];
                        for (o, v) in dst.iter_mut().zip(&gd[i * len * w..(i + 1) * len * w]) {
                            *o += v;
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let k = *self.shape(*logits).last().unwrap();
                let scale = gd[0] / targets.len() as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * k + t] -= scale;
                }
                let shape = self.shape(*logits).to_vec();
                self.accumulate(grads, *logits, Tensor::new(shape, d));
            }
            Op::StraightThrough { encoded } => self.accumulate(grads, *encoded, g.clone()),
            Op::BceWithLogits { x, target_real } => {
                let xv = self.value(*x);
                let n = xv.numel() as f64;
                let sign = if *target_real { -1.0 } else { 1.0 };
                let d = xv
                    .data()
                    .iter()
                    .map(|&v| {
                        if tensor::softplus(sign * v) >= LOG_CLAMP {
                            0.0
                        } else {
                            gd[0] * sign * tensor::sigmoid(sign * v) / n
                        }
                    })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d));
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x).to_vec();
                let area = s[2] * s[3];
                let mut d = Vec::with_capacity(area * gd.len());
                for &gv in gd {
                    d.extend(std::iter::repeat_n(gv / area as f64, area));
                }
                self.accumulate(grads, *x, Tensor::new(s, d));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
        gd: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        let s = self.shape(q).to_vec();
        let (batch, len, width) = (s[0], s[1], s[2]);
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut gq = vec![0.0; qv.len()];
        let mut gk = vec![0.0; kv.len()];
        let mut gv = vec![0.0; vv.len()];
        let mut dp = vec![0.0; len * len];
        for bi in 0..batch {
            let off = bi * len * width;
            for h in 0..heads {
                let col = off + h * dh;
                let p = &probs[(bi * heads + h) * len * len..(bi * heads + h + 1) * len * len];
                let sv = MatView::strided(len, dh, width);
                // dV = Pᵀ dO
                gemm(p, MatView::row_major(len, len).t(), &gd[col..], sv, &mut gv[col..], sv, 1.0);
                // dP = dO Vᵀ
                gemm(&gd[col..], sv, &vv[col..], sv.t(), &mut dp, MatView::row_major(len, len), 0.0);
                // dS = P ∘ (dP - rowsum(dP ∘ P)), folded with the score scale
                for i in 0..len {
                    let pr = &p[i * len..(i + 1) * len];
                    let dr = &mut dp[i * len..(i + 1) * len];
                    let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                    for j in 0..len {
                        dr[j] = pr[j] * (dr[j] - dot) * scale;
                    }
                }
                gemm(&dp, MatView::row_major(len, len), &kv[col..], sv, &mut gq[col..], sv, 1.0);
                gemm(&dp, MatView::row_major(len, len).t(), &qv[col..], sv, &mut gk[col..], sv, 1.0);
            }
        }
        for (var, d) in [(q, gq), (k, gk), (v, gv)] {
            self.accumulate(grads, var, Tensor::new(s.clone(), d));
        }
    }
}
