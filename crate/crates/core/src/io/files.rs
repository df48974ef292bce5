//! File-level operations: atomic writes and the encode/decode pipelines.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::checkpoint::Checkpoint;
use super::container::{decode_tensor, encode_tensor, Dtype};
use super::tokens::TokenStream;
use crate::error::{Error, Result};
use crate::generation::{GridMeta, TokenGrid};
use crate::model::{Head, Model};
use crate::tensor::Tensor;

/// Writes through a temporary file in the same directory, then renames.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn read_tensor_file(path: &Path) -> Result<Tensor> {
    decode_tensor(&fs::read(path)?)
}

pub fn write_tensor_file(path: &Path, t: &Tensor, dtype: Dtype) -> Result<()> {
    atomic_write(path, &encode_tensor(t, dtype)?)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::decode(&fs::read(path)?)
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    atomic_write(path, &ck.encode()?)
}

/// Accepts `[F, H, W, 3]` or `[1, F, H, W, 3]` and returns the batched form.
pub fn as_clip_batch(t: &Tensor) -> Result<Tensor> {
    match t.ndim() {
        4 => {
            let mut s = vec![1];
            s.extend_from_slice(t.shape());
            t.reshape(&s)
        }
        5 if t.shape()[0] == 1 => Ok(t.clone()),
        _ => Err(Error::Shape {
            op: "clip",
            lhs: t.shape().to_vec(),
            rhs: vec![1, 0, 0, 0, 3],
        }),
    }
}

/// Size accounting printed by `encode`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompressionSummary {
    pub input_bytes: usize,
    pub tokens: usize,
    pub bits_per_token: f64,
    pub stream_bytes: usize,
}

impl fmt::Display for CompressionSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "input_bytes={} tokens={} bits_per_token={:.3} stream_bytes={} ratio={:.1}",
            self.input_bytes,
            self.tokens,
            self.bits_per_token,
            self.stream_bytes,
            self.input_bytes as f64 / self.stream_bytes.max(1) as f64
        )
    }
}

/// Quantizes a clip into a token stream with a VQ tokenizer.
pub fn encode_clip(model: &mut Model, clip: &Tensor, cond: Option<u32>) -> Result<TokenStream> {
    if model.head() != Head::Vq {
        return Err(Error::invalid("encoding to tokens needs a VQ tokenizer checkpoint"));
    }
    let x = as_clip_batch(clip)?;
    let (indices, [_, s, h, w]) = model.encode_indices(&x)?;
    Ok(TokenStream {
        codebook_size: model.codebook.size,
        grid: TokenGrid::new(GridMeta::new(s, h, w), indices)?,
        cond,
    })
}

/// Pixels `[1, F, H, W, 3]` for a token stream.
pub fn decode_stream(model: &Model, stream: &TokenStream) -> Result<Tensor> {
    if stream.codebook_size != model.codebook.size {
        return Err(Error::invalid(format!(
            "token stream codebook size {} does not match checkpoint codebook {}",
            stream.codebook_size, model.codebook.size
        )));
    }
    model.decode_indices(&stream.grid.indices, stream.grid.meta.as_grid())
}

pub fn encode_file(input: &Path, checkpoint: &Checkpoint, output: &Path, cond: Option<u32>) -> Result<CompressionSummary> {
    if checkpoint.head != Head::Vq {
        return Err(Error::invalid("encode needs a VQ checkpoint, got a KL checkpoint"));
    }
    let input_bytes = fs::metadata(input)?.len() as usize;
    let clip = read_tensor_file(input)?;
    let mut model = checkpoint.to_model()?;
    let stream = encode_clip(&mut model, &clip, cond)?;
    let bytes = stream.encode()?;
    atomic_write(output, &bytes)?;
    let k = stream.codebook_size as f64;
    Ok(CompressionSummary {
        input_bytes,
        tokens: stream.grid.indices.len(),
        bits_per_token: k.log2(),
        stream_bytes: bytes.len(),
    })
}

pub fn decode_file(input: &Path, checkpoint: &Checkpoint, output: &Path) -> Result<Tensor> {
    let stream = TokenStream::decode(&fs::read(input)?)?;
    let model = checkpoint.to_model()?;
    let x = decode_stream(&model, &stream)?;
    write_tensor_file(output, &x, Dtype::F32)?;
    Ok(x)
}

/// Reconstruction quality with PSNR for a 2-unit value range.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub mse: f64,
    pub psnr: f64,
}

pub const PSNR_CAP: f64 = 99.0;

pub fn metrics_report(x: &Tensor, x_hat: &Tensor) -> Result<Metrics> {
    if x.shape() != x_hat.shape() {
        return Err(Error::Shape {
            op: "metrics_report",
            lhs: x.shape().to_vec(),
            rhs: x_hat.shape().to_vec(),
        });
    }
    let n = x.numel().max(1) as f64;
    let mse = x.data().iter().zip(x_hat.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    Ok(Metrics { mse, psnr: psnr(mse) })
}

pub fn psnr(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (4.0 / mse).log10()).min(PSNR_CAP)
}
