//! Generators over tokenizer outputs: an autoregressive model of flattened
//! code grids and a small latent diffusion model.

mod diffusion;
mod lm;
mod predict;
mod sequence;

pub use diffusion::{
    ddpm_noise, ddpm_noise_batch, ddpm_sample, ddpm_train_loss, draw_noise, Denoiser, DenoiserConfig, DiffusionConfig,
    NoisePredictor, BETA_END, BETA_START, DEFAULT_STEPS,
};
pub use lm::{ar_sample, argmax, LmConfig, Sampling, TokenLm};
pub use predict::{frame_predict, PredictOptions, Prediction};
pub use sequence::{flatten_raster, unflatten, GridMeta, TokenGrid, TokenSequence};
