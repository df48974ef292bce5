//! Spatial-temporal decoupled tokenizer network.

mod config;
mod net;

pub use config::{NetConfig, PatchConfig, TokenizerConfig};
pub use net::{CausalBlock, Decoder, Encoder, Modality, Positions, TokenField, TokenizerNet, WindowBlock};
