//! Layers and optimization on top of [`crate::autograd`].

mod layers;
mod optim;
mod params;

#[cfg(test)]
mod tests;

pub use layers::{
    causal_mask, cross_entropy, lora_linear_forward, CausalSelfAttention, FeedForward, LayerNorm,
    Linear, LoraAdapter, LoraLinear,
};
pub use optim::{lr_at, Adam};
pub use params::{reduce_grads, Binder, Param, ParamGrads, ParamId, ParamStore};
