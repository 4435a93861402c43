//! Parameterized building blocks over [`Graph`].

use rand_chacha::ChaCha8Rng;

use super::graph::{AttnMask, Graph, Var};
use super::params::{uniform_fan_in, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub(crate) w: ParamId,
    pub(crate) b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        frozen: bool,
    ) -> Self {
        let fan_in = c_in * k * k;
        let w = uniform_fan_in(rng, &[c_out, c_in, k, k], fan_in);
        let b = uniform_fan_in(rng, &[c_out], fan_in);
        let (w, b) = if frozen {
            (
                store.add_frozen(format!("{name}.weight"), w),
                store.add_frozen(format!("{name}.bias"), b),
            )
        } else {
            (store.add(format!("{name}.weight"), w), store.add(format!("{name}.bias"), b))
        };
        Self {
            w,
            b,
            stride,
            pad: k / 2,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub(crate) w: ParamId,
    pub(crate) b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, inp: usize, out: usize) -> Self {
        let w = store.add(format!("{name}.weight"), uniform_fan_in(rng, &[inp, out], inp));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[out]));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.linear(x, w, b)
    }

    /// Plain forward over `rows × in` values, outside any graph.
    pub fn apply(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let w = store.get(self.w);
        let (inp, out) = (w.shape()[0], w.shape()[1]);
        crate::tensor::linear_forward(x, w.data(), store.get(self.b).data(), x.len() / inp, inp, out)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub(crate) gamma: ParamId,
    pub(crate) beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[width], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[width])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }

    pub fn apply(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let gamma = store.get(self.gamma).data();
        crate::tensor::layer_norm_forward(x, gamma, store.get(self.beta).data(), gamma.len()).0
    }
}

/// Pre-norm residual self-attention: `x + proj(attn(ln(x)))` over `[B, L, W]`.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub(crate) norm: LayerNorm,
    pub(crate) q: Linear,
    pub(crate) k: Linear,
    pub(crate) v: Linear,
    pub(crate) proj: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, width: usize, heads: usize) -> Self {
        Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), width),
            q: Linear::new(store, rng, &format!("{name}.q"), width, width),
            k: Linear::new(store, rng, &format!("{name}.k"), width, width),
            v: Linear::new(store, rng, &format!("{name}.v"), width, width),
            proj: Linear::new(store, rng, &format!("{name}.proj"), width, width),
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mask: AttnMask) -> Var {
        let h = self.norm.forward(g, store, x);
        let q = self.q.forward(g, store, h);
        let k = self.k.forward(g, store, h);
        let v = self.v.forward(g, store, h);
        let a = g.attention(q, k, v, self.heads, mask);
        let o = self.proj.forward(g, store, a);
        g.add(x, o)
    }
}

/// Pre-norm residual feed-forward block with a 4× hidden expansion.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub(crate) norm: LayerNorm,
    pub(crate) fc1: Linear,
    pub(crate) fc2: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, width: usize) -> Self {
        Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), width),
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), width, 4 * width),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), 4 * width, width),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.norm.forward(g, store, x);
        let h = self.fc1.forward(g, store, h);
        let h = g.silu(h);
        let h = self.fc2.forward(g, store, h);
        g.add(x, h)
    }

    pub fn apply(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let h = self.norm.apply(store, x);
        let h: Vec<f64> = self.fc1.apply(store, &h).into_iter().map(crate::tensor::silu).collect();
        let h = self.fc2.apply(store, &h);
        x.iter().zip(h).map(|(a, b)| a + b).collect()
    }
}
