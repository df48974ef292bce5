//! Spatial-temporal factorized encoder and its mirrored decoder.
//!
//! Token fields flow through the graph as `[B, S, Gh, Gw, C]`: batch, token
//! slots (slot 0 is the first frame, each later slot covers `t` frames), grid
//! rows, grid columns, channels.

use super::config::TokenizerConfig;
use crate::error::{Error, Result};
use crate::nn::{causal_mask, Block, Fwd, LayerNorm, Linear, ParamId, ParamStore};
use crate::tensor::{RngStream, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Image,
    Video,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Video => "video",
        }
    }
}

/// A patchified token field inside a graph.
#[derive(Clone, Copy, Debug)]
pub struct TokenField {
    /// `[B, S, Gh, Gw, C]`
    pub embeddings: Var,
    pub modality: Modality,
}

fn dims5(f: &Fwd, v: Var, op: &'static str) -> Result<[usize; 5]> {
    let s = f.g.shape(v);
    <[usize; 5]>::try_from(s).map_err(|_| Error::Shape {
        op,
        lhs: s.to_vec(),
        rhs: vec![],
    })
}

/// Learned absolute positions: a spatial table shared across time and a
/// temporal table shared across space, cropped to the active grid.
#[derive(Clone, Debug)]
pub struct Positions {
    pub spatial: ParamId,
    pub temporal: ParamId,
}

impl Positions {
    fn new(store: &mut ParamStore, name: &str, cfg: &TokenizerConfig, rng: &mut RngStream) -> Self {
        let (g, s, c) = (cfg.max_grid(), cfg.max_slots(), cfg.patch.hidden);
        Self {
            spatial: store.add(format!("{name}.spatial"), rng.normal_tensor(&[g, g, c], 0.02)),
            temporal: store.add(format!("{name}.temporal"), rng.normal_tensor(&[s, c], 0.02)),
        }
    }

    pub fn forward(&self, f: &mut Fwd, tf: TokenField) -> Result<TokenField> {
        let [_, s, gh, gw, c] = dims5(f, tf.embeddings, "add_positions")?;
        let sp = f.p(self.spatial);
        let tp = f.p(self.temporal);
        let (max_g, max_s) = (f.g.shape(sp)[0], f.g.shape(tp)[0]);
        if gh > max_g || gw > max_g || s > max_s {
            return Err(Error::invalid(format!(
                "token grid {s}x{gh}x{gw} exceeds position tables {max_s}x{max_g}x{max_g}"
            )));
        }
        let sp = f.g.slice(sp, 0, 0, gh)?;
        let sp = f.g.slice(sp, 1, 0, gw)?;
        let tp = f.g.slice(tp, 0, 0, s)?;
        let tp = f.g.reshape(tp, &[s, 1, 1, c])?;
        let x = f.g.add(tf.embeddings, sp)?;
        let x = f.g.add(x, tp)?;
        Ok(TokenField { embeddings: x, ..tf })
    }
}

/// Self-attention confined to disjoint `w × w` windows of each frame slot.
#[derive(Clone, Debug)]
pub struct WindowBlock {
    pub block: Block,
    pub window: usize,
}

impl WindowBlock {
    pub fn forward(&self, f: &mut Fwd, tf: TokenField) -> Result<TokenField> {
        let [b, s, gh, gw, c] = dims5(f, tf.embeddings, "window_attention")?;
        let w = self.window;
        for (axis, extent) in [("grid rows", gh), ("grid cols", gw)] {
            if extent % w != 0 {
                return Err(Error::Indivisible {
                    op: "window_attention",
                    axis,
                    extent,
                    divisor: w,
                });
            }
        }
        let (nh, nw) = (gh / w, gw / w);
        let x = f.g.reshape(tf.embeddings, &[b, s, nh, w, nw, w, c])?;
        let x = f.g.permute(x, &[0, 1, 2, 4, 3, 5, 6])?;
        let x = f.g.reshape(x, &[b * s * nh * nw, w * w, c])?;
        let x = self.block.forward(f, x, None)?;
        let x = f.g.reshape(x, &[b, s, nh, nw, w, w, c])?;
        let x = f.g.permute(x, &[0, 1, 2, 4, 3, 5, 6])?;
        let x = f.g.reshape(x, &[b, s, gh, gw, c])?;
        Ok(TokenField { embeddings: x, ..tf })
    }
}

/// Causal self-attention along the slot axis, independently per grid site.
#[derive(Clone, Debug)]
pub struct CausalBlock {
    pub block: Block,
}

impl CausalBlock {
    pub fn forward(&self, f: &mut Fwd, tf: TokenField) -> Result<TokenField> {
        let [b, s, gh, gw, c] = dims5(f, tf.embeddings, "causal_attention")?;
        let x = f.g.permute(tf.embeddings, &[0, 2, 3, 1, 4])?;
        let x = f.g.reshape(x, &[b * gh * gw, s, c])?;
        let mask = causal_mask(s);
        let x = self.block.forward(f, x, Some(&mask))?;
        let x = f.g.reshape(x, &[b, gh, gw, s, c])?;
        let x = f.g.permute(x, &[0, 3, 1, 2, 4])?;
        Ok(TokenField { embeddings: x, ..tf })
    }
}

fn blocks<T>(
    store: &mut ParamStore,
    cfg: &TokenizerConfig,
    prefix: &str,
    n: usize,
    rng: &mut RngStream,
    wrap: impl Fn(Block) -> T,
) -> Result<Vec<T>> {
    (0..n)
        .map(|i| {
            Block::new(
                store,
                &format!("{prefix}.{i}"),
                cfg.patch.hidden,
                cfg.net.heads,
                cfg.net.mlp_ratio,
                rng,
            )
            .map(&wrap)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub patch_image: Linear,
    pub patch_video: Linear,
    pub pos: Positions,
    pub spatial: Vec<WindowBlock>,
    pub temporal: Vec<CausalBlock>,
    pub norm: LayerNorm,
    pub head: Linear,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub input: Linear,
    pub pos: Positions,
    pub temporal: Vec<CausalBlock>,
    pub spatial: Vec<WindowBlock>,
    pub norm: LayerNorm,
    pub out_image: Linear,
    pub out_video: Linear,
}

/// The tokenizer network: parameter handles plus configuration.
#[derive(Clone, Debug)]
pub struct TokenizerNet {
    pub cfg: TokenizerConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl TokenizerNet {
    pub fn new(store: &mut ParamStore, cfg: &TokenizerConfig, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        let (p, t, c) = (cfg.patch.patch, cfg.patch.temporal_patch, cfg.patch.hidden);
        let w = cfg.net.window;
        let image_patch = p * p * 3;
        let video_patch = t * p * p * 3;
        let encoder = Encoder {
            patch_image: Linear::new(store, "enc.patch_image", image_patch, c, rng),
            patch_video: Linear::new(store, "enc.patch_video", video_patch, c, rng),
            pos: Positions::new(store, "enc.pos", cfg, rng),
            spatial: blocks(store, cfg, "enc.spatial", cfg.net.spatial_layers, rng, |block| WindowBlock {
                block,
                window: w,
            })?,
            temporal: blocks(store, cfg, "enc.temporal", cfg.net.temporal_layers, rng, |block| {
                CausalBlock { block }
            })?,
            norm: LayerNorm::new(store, "enc.norm", c),
            head: Linear::new(store, "enc.head", c, c, rng),
        };
        let decoder = Decoder {
            input: Linear::new(store, "dec.input", c, c, rng),
            pos: Positions::new(store, "dec.pos", cfg, rng),
            temporal: blocks(store, cfg, "dec.temporal", cfg.net.temporal_layers, rng, |block| {
                CausalBlock { block }
            })?,
            spatial: blocks(store, cfg, "dec.spatial", cfg.net.spatial_layers, rng, |block| WindowBlock {
                block,
                window: w,
            })?,
            norm: LayerNorm::new(store, "dec.norm", c),
            out_image: Linear::new(store, "dec.out_image", c, image_patch, rng),
            out_video: Linear::new(store, "dec.out_video", c, video_patch, rng),
        };
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            decoder,
        })
    }

    /// `[B, 1+T, H, W, 3]` pixels to `[B, 1+T/t, H/p, W/p, C]` embeddings.
    /// The first frame uses the image projection; later frames are grouped in
    /// `t`-frame tubes and use the video projection.
    pub fn patchify(&self, f: &mut Fwd, x: Var) -> Result<TokenField> {
        let shape = f.g.shape(x).to_vec();
        let [b, frames, h, w, ch] = shape[..] else {
            return Err(Error::Shape {
                op: "patchify",
                lhs: shape,
                rhs: vec![],
            });
        };
        if ch != 3 {
            return Err(Error::Shape {
                op: "patchify",
                lhs: shape,
                rhs: vec![3],
            });
        }
        let (slots, gh, gw) = self.cfg.grid_for(frames, h, w)?;
        let p = self.cfg.patch.patch;
        let t = self.cfg.patch.temporal_patch;

        let first = f.g.slice(x, 1, 0, 1)?;
        let first = f.g.reshape(first, &[b, gh, p, gw, p, 3])?;
        let first = f.g.permute(first, &[0, 1, 3, 2, 4, 5])?;
        let first = f.g.reshape(first, &[b, 1, gh, gw, p * p * 3])?;
        let first = self.encoder.patch_image.forward(f, first)?;
        let embeddings = if slots == 1 {
            first
        } else {
            let rest = f.g.slice(x, 1, 1, frames - 1)?;
            let rest = f.g.reshape(rest, &[b, slots - 1, t, gh, p, gw, p, 3])?;
            let rest = f.g.permute(rest, &[0, 1, 3, 5, 2, 4, 6, 7])?;
            let rest = f.g.reshape(rest, &[b, slots - 1, gh, gw, t * p * p * 3])?;
            let rest = self.encoder.patch_video.forward(f, rest)?;
            f.g.concat(&[first, rest], 1)?
        };
        Ok(TokenField {
            embeddings,
            modality: if frames == 1 { Modality::Image } else { Modality::Video },
        })
    }

    /// Full encoder: patchify, positions, window blocks, causal blocks, head.
    pub fn encode(&self, f: &mut Fwd, x: Var) -> Result<TokenField> {
        let mut tf = self.patchify(f, x)?;
        tf = self.encoder.pos.forward(f, tf)?;
        for blk in &self.encoder.spatial {
            tf = blk.forward(f, tf)?;
        }
        for blk in &self.encoder.temporal {
            tf = blk.forward(f, tf)?;
        }
        let h = self.encoder.norm.forward(f, tf.embeddings)?;
        let h = self.encoder.head.forward(f, h)?;
        Ok(TokenField { embeddings: h, ..tf })
    }

    /// `[B, S, Gh, Gw, C]` latents back to `[B, 1+(S-1)·t, H, W, 3]` pixels.
    pub fn decode(&self, f: &mut Fwd, z: Var) -> Result<Var> {
        let [b, s, gh, gw, c] = dims5(f, z, "decode")?;
        if c != self.cfg.patch.hidden || s == 0 {
            return Err(Error::Shape {
                op: "decode",
                lhs: vec![b, s, gh, gw, c],
                rhs: vec![self.cfg.patch.hidden],
            });
        }
        let p = self.cfg.patch.patch;
        let t = self.cfg.patch.temporal_patch;
        let (h, w) = (gh * p, gw * p);
        let x = self.decoder.input.forward(f, z)?;
        let mut tf = TokenField {
            embeddings: x,
            modality: if s == 1 { Modality::Image } else { Modality::Video },
        };
        tf = self.decoder.pos.forward(f, tf)?;
        for blk in &self.decoder.temporal {
            tf = blk.forward(f, tf)?;
        }
        for blk in &self.decoder.spatial {
            tf = blk.forward(f, tf)?;
        }
        let x = self.decoder.norm.forward(f, tf.embeddings)?;

        let first = f.g.slice(x, 1, 0, 1)?;
        let first = self.decoder.out_image.forward(f, first)?;
        let first = f.g.reshape(first, &[b, 1, gh, gw, p, p, 3])?;
        let first = f.g.permute(first, &[0, 1, 2, 4, 3, 5, 6])?;
        let first = f.g.reshape(first, &[b, 1, h, w, 3])?;
        if s == 1 {
            return Ok(first);
        }
        let rest = f.g.slice(x, 1, 1, s - 1)?;
        let rest = self.decoder.out_video.forward(f, rest)?;
        let rest = f.g.reshape(rest, &[b, s - 1, gh, gw, t, p, p, 3])?;
        let rest = f.g.permute(rest, &[0, 1, 4, 2, 5, 3, 6, 7])?;
        let rest = f.g.reshape(rest, &[b, (s - 1) * t, h, w, 3])?;
        f.g.concat(&[first, rest], 1)
    }
}
