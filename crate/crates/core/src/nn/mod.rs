//! Minimal differentiable-graph machinery: tensors on a tape, layers, Adam.

mod graph;
mod layers;
mod params;

pub use graph::{AttnMask, Grads, Graph, Var, LOG_CLAMP};
pub use layers::{Conv2d, FeedForward, LayerNorm, Linear, SelfAttention};
pub use params::{gaussian, uniform_fan_in, Adam, AdamConfig, ParamId, ParamStore};
