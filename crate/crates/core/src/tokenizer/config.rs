use crate::error::{Error, Result};

/// Patch geometry and hidden width.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchConfig {
    /// spatial patch side in pixels
    pub patch: usize,
    /// frames per temporal patch
    pub temporal_patch: usize,
    pub hidden: usize,
    /// allowed square resolutions (H = W)
    pub resolutions: Vec<usize>,
    /// longest clip (1 + T frames) the position tables cover
    pub max_frames: usize,
}

/// Transformer depth and attention layout.
#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub spatial_layers: usize,
    pub temporal_layers: usize,
    pub window: usize,
    pub heads: usize,
    pub latent_dim: usize,
    pub mlp_ratio: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenizerConfig {
    pub patch: PatchConfig,
    pub net: NetConfig,
}

impl Default for TokenizerConfig {
    /// Desk-scale defaults.
    fn default() -> Self {
        Self {
            patch: PatchConfig {
                patch: 8,
                temporal_patch: 4,
                hidden: 128,
                resolutions: vec![32, 48, 64],
                max_frames: 17,
            },
            net: NetConfig {
                spatial_layers: 4,
                temporal_layers: 4,
                window: 2,
                heads: 4,
                latent_dim: 8,
                mlp_ratio: 4,
            },
        }
    }
}

impl TokenizerConfig {
    /// Full-size configuration (hidden 512, window 8, resolutions 128..384).
    pub fn paper_scale() -> Self {
        Self {
            patch: PatchConfig {
                patch: 8,
                temporal_patch: 4,
                hidden: 512,
                resolutions: vec![128, 192, 256, 320, 384],
                max_frames: 17,
            },
            net: NetConfig {
                spatial_layers: 4,
                temporal_layers: 4,
                window: 8,
                heads: 8,
                latent_dim: 8,
                mlp_ratio: 4,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.patch;
        let n = &self.net;
        let bad = |m: String| Err(Error::Config(m));
        if p.patch == 0 || p.temporal_patch == 0 || p.hidden == 0 || n.window == 0 || n.latent_dim == 0 {
            return bad("patch, temporal_patch, hidden, window and latent_dim must be positive".into());
        }
        if n.heads == 0 || p.hidden % n.heads != 0 {
            return bad(format!("hidden {} not divisible by heads {}", p.hidden, n.heads));
        }
        if p.resolutions.is_empty() {
            return bad("at least one resolution is required".into());
        }
        for &r in &p.resolutions {
            if r % p.patch != 0 {
                return bad(format!("resolution {r} not divisible by patch {}", p.patch));
            }
            if (r / p.patch) % n.window != 0 {
                return bad(format!(
                    "resolution {r}: token grid {} not divisible by window {}",
                    r / p.patch,
                    n.window
                ));
            }
        }
        if p.max_frames == 0 || (p.max_frames - 1) % p.temporal_patch != 0 {
            return bad(format!(
                "max_frames {} must be 1 + a multiple of temporal_patch {}",
                p.max_frames, p.temporal_patch
            ));
        }
        Ok(())
    }

    pub fn max_grid(&self) -> usize {
        self.patch.resolutions.iter().copied().max().unwrap_or(0) / self.patch.patch
    }

    pub fn max_slots(&self) -> usize {
        1 + (self.patch.max_frames - 1) / self.patch.temporal_patch
    }

    /// Token grid `(slots, rows, cols)` for a clip of `frames × height × width`.
    pub fn grid_for(&self, frames: usize, height: usize, width: usize) -> Result<(usize, usize, usize)> {
        let p = self.patch.patch;
        let t = self.patch.temporal_patch;
        if frames == 0 {
            return Err(Error::Indivisible {
                op: "patchify",
                axis: "frames",
                extent: 0,
                divisor: t,
            });
        }
        if (frames - 1) % t != 0 {
            return Err(Error::Indivisible {
                op: "patchify",
                axis: "frames",
                extent: frames - 1,
                divisor: t,
            });
        }
        if height % p != 0 {
            return Err(Error::Indivisible {
                op: "patchify",
                axis: "height",
                extent: height,
                divisor: p,
            });
        }
        if width % p != 0 {
            return Err(Error::Indivisible {
                op: "patchify",
                axis: "width",
                extent: width,
                divisor: p,
            });
        }
        Ok((1 + (frames - 1) / t, height / p, width / p))
    }

    /// Number of pixel frames decoded from `slots` token slots.
    pub fn frames_for_slots(&self, slots: usize) -> usize {
        1 + slots.saturating_sub(1) * self.patch.temporal_patch
    }
}
