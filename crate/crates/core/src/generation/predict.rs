use super::lm::{Sampling, TokenLm};
use super::sequence::{GridMeta, TokenGrid};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{RngStream, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictOptions {
    pub sampling: Sampling,
    pub cond: Option<usize>,
    /// allow generating past the LM context by sliding the window one slot at a time
    pub slide: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// `[1, F, H, W, 3]`
    pub video: Tensor,
    /// tokens of the first window: the prefix slots followed by sampled slots
    pub grid: TokenGrid,
}

/// Continues a clip `[1, F, H, W, 3]` by `n_future_slots` token slots.
///
/// The prefix codes are kept fixed and the LM samples the rest of the grid.
/// When the result does not fit the LM context (or the tokenizer's slot
/// limit), the window moves forward one slot at a time: the last decoded
/// frames are re-encoded as the new prefix and one more slot is sampled.
pub fn frame_predict(
    model: &mut Model,
    lm: &TokenLm,
    prefix: &Tensor,
    n_future_slots: usize,
    opts: PredictOptions,
    rng: &mut RngStream,
) -> Result<Prediction> {
    if prefix.ndim() != 5 || prefix.shape()[0] != 1 {
        return Err(Error::Shape {
            op: "frame_predict",
            lhs: prefix.shape().to_vec(),
            rhs: vec![1],
        });
    }
    if model.codebook.size != lm.cfg.codebook_size {
        return Err(Error::invalid(format!(
            "LM vocabulary {} does not match codebook size {}",
            lm.cfg.codebook_size, model.codebook.size
        )));
    }
    let (idx, grid) = model.encode_indices(prefix)?;
    let [_, sp, gh, gw] = grid;
    let per_slot = gh * gw;
    let total = sp + n_future_slots;
    let window = (lm.cfg.context / per_slot).min(model.cfg.tokenizer.max_slots());
    if sp > window {
        return Err(Error::invalid(format!(
            "prefix of {sp} slots does not fit a window of {window} slots"
        )));
    }
    let first = total.min(window);
    if total > window && !opts.slide {
        return Err(Error::invalid(format!(
            "{total} slots exceed the context window of {window} slots (enable sliding)"
        )));
    }
    if total > window && window < 2 {
        return Err(Error::invalid("sliding needs a window of at least two slots"));
    }

    let sampled = lm.continue_codes(opts.cond, &idx, (first - sp) * per_slot, opts.sampling, rng)?;
    let mut codes = idx;
    codes.extend(sampled);
    let meta = GridMeta::new(first, gh, gw);
    let mut video = model.decode_indices(&codes, meta.as_grid())?;
    let grid = TokenGrid::new(meta, codes)?;

    let t = model.cfg.tokenizer.patch.temporal_patch;
    let keep = model.cfg.tokenizer.frames_for_slots(window - 1);
    for _ in first..total {
        let frames = video.shape()[1];
        let context = video.narrow(1, frames - keep, keep)?;
        let (ctx, _) = model.encode_indices(&context)?;
        let next = lm.continue_codes(opts.cond, &ctx, per_slot, opts.sampling, rng)?;
        let mut codes = ctx;
        codes.extend(next);
        let decoded = model.decode_indices(&codes, GridMeta::new(window, gh, gw).as_grid())?;
        let new = decoded.narrow(1, decoded.shape()[1] - t, t)?;
        video = Tensor::concat(&[&video, &new], 1)?;
    }
    Ok(Prediction { video, grid })
}
