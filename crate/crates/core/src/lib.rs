//! Joint image and video tokenizer.
//!
//! Visual inputs of shape `(1+T) × H × W × 3` are patchified (first frame and
//! remaining frames separately), passed through spatial window-attention and
//! temporal causal-attention blocks, and bottlenecked either by a factorized,
//! l2-normalized vector quantizer or by a diagonal Gaussian head. Downstream,
//! an autoregressive token model and a latent DDPM generate new samples.

pub mod error;
pub mod generation;
pub mod io;
pub mod model;
pub mod nn;
pub mod quantizer;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
