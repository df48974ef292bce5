//! Latent bottlenecks: a factorized, l2-normalized vector quantizer with a
//! straight-through estimator, and a diagonal Gaussian (KL) head.

mod codebook;
mod gaussian;

pub use codebook::{
    nearest_code, Codebook, FrozenSelection, QuantizeOutput, Selection, CODEBOOK_WEIGHT, COMMITMENT_WEIGHT,
};
pub use gaussian::{kl_divergence, GaussianOutput, KlHead, Noise, KL_WEIGHT, LOGVAR_INIT, LOGVAR_MAX, LOGVAR_MIN};

use crate::error::{Error, Result};

/// Fraction of codes used and perplexity of the usage distribution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CodebookStats {
    pub usage_fraction: f64,
    pub perplexity: f64,
}

/// Statistics over raw usage counts.
pub fn usage_stats(counts: &[u64]) -> Result<CodebookStats> {
    let total: u64 = counts.iter().sum();
    if total == 0 || counts.is_empty() {
        return Err(Error::invalid("codebook_stats: no tokens quantized since reset"));
    }
    let used = counts.iter().filter(|&&c| c > 0).count();
    let entropy: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum();
    Ok(CodebookStats {
        usage_fraction: used as f64 / counts.len() as f64,
        perplexity: entropy.exp(),
    })
}
