//! Parameter storage and the transformer building blocks shared by the
//! tokenizer and the generators.

mod layers;
mod params;

pub use layers::{causal_mask, Attention, Block, LayerNorm, Linear, Mlp, LN_EPS, MASKED_SCORE};
pub use params::{Fwd, ParamId, ParamStore};
