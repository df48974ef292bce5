//! `OTTK` token stream: magic, `u16` version, `u32` codebook size, `u16`
//! grid dims (slots, rows, cols), `u32` condition (`0xFFFFFFFF` = none),
//! then one `u16` index per token when the codebook fits, else `u32`.

use super::container::Reader;
use crate::error::{Error, Result};
use crate::generation::{GridMeta, TokenGrid};

pub const TOKEN_MAGIC: &[u8; 4] = b"OTTK";
pub const TOKEN_VERSION: u16 = 1;
pub const NO_CONDITION: u32 = u32::MAX;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenStream {
    pub codebook_size: usize,
    pub grid: TokenGrid,
    pub cond: Option<u32>,
}

impl TokenStream {
    /// Bytes per stored index.
    pub fn index_width(codebook_size: usize) -> usize {
        if codebook_size <= 1 << 16 {
            2
        } else {
            4
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let k = self.codebook_size;
        if k == 0 || k > u32::MAX as usize {
            return Err(Error::Format(format!("codebook size {k} not representable")));
        }
        if let Some(&bad) = self.grid.indices.iter().find(|&&i| i >= k) {
            return Err(Error::Format(format!("index {bad} outside codebook of {k}")));
        }
        if self.cond == Some(NO_CONDITION) {
            return Err(Error::Format("condition id 0xFFFFFFFF is reserved".into()));
        }
        let m = self.grid.meta;
        let dim = |d: usize| u16::try_from(d).map_err(|_| Error::Format(format!("grid dimension {d} exceeds u16")));
        let w = Self::index_width(k);
        let mut out = Vec::with_capacity(22 + m.len() * w);
        out.extend_from_slice(TOKEN_MAGIC);
        out.extend_from_slice(&TOKEN_VERSION.to_le_bytes());
        out.extend_from_slice(&(k as u32).to_le_bytes());
        for d in [m.slots, m.height, m.width] {
            out.extend_from_slice(&dim(d)?.to_le_bytes());
        }
        out.extend_from_slice(&self.cond.unwrap_or(NO_CONDITION).to_le_bytes());
        for &i in &self.grid.indices {
            if w == 2 {
                out.extend_from_slice(&(i as u16).to_le_bytes());
            } else {
                out.extend_from_slice(&(i as u32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != TOKEN_MAGIC {
            return Err(Error::Format("bad token stream magic".into()));
        }
        let version = r.u16()?;
        if version != TOKEN_VERSION {
            return Err(Error::Format(format!("unsupported token stream version {version}")));
        }
        let k = r.u32()? as usize;
        if k == 0 {
            return Err(Error::Format("token stream codebook size is zero".into()));
        }
        let meta = GridMeta::new(r.u16()? as usize, r.u16()? as usize, r.u16()? as usize);
        let cond = match r.u32()? {
            NO_CONDITION => None,
            c => Some(c),
        };
        let w = Self::index_width(k);
        if r.remaining() != meta.len() * w {
            return Err(Error::Format(format!(
                "token payload is {} bytes, expected {} for {} tokens",
                r.remaining(),
                meta.len() * w,
                meta.len()
            )));
        }
        let indices: Vec<usize> = r
            .rest()
            .chunks_exact(w)
            .map(|c| {
                if w == 2 {
                    u16::from_le_bytes([c[0], c[1]]) as usize
                } else {
                    u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize
                }
            })
            .collect();
        if let Some(&bad) = indices.iter().find(|&&i| i >= k) {
            return Err(Error::Format(format!("index {bad} outside codebook of {k}")));
        }
        Ok(Self {
            codebook_size: k,
            grid: TokenGrid::new(meta, indices)?,
            cond,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream(k: usize) -> TokenStream {
        let meta = GridMeta::new(2, 1, 3);
        TokenStream {
            codebook_size: k,
            grid: TokenGrid::new(meta, vec![0, 1, k - 1, 3, 4, 5]).unwrap(),
            cond: Some(2),
        }
    }

    #[test]
    fn header_layout() {
        let b = stream(512).encode().unwrap();
        assert_eq!(&b[..4], b"OTTK");
        assert_eq!(&b[6..10], &512u32.to_le_bytes());
        assert_eq!(&b[10..16], &[2, 0, 1, 0, 3, 0]);
        assert_eq!(&b[16..20], &[2, 0, 0, 0]);
        assert_eq!(b.len(), 20 + 6 * 2);
    }

    #[test]
    fn wide_indices_above_u16() {
        let s = stream(70_000);
        let b = s.encode().unwrap();
        assert_eq!(b.len(), 20 + 6 * 4);
        assert_eq!(TokenStream::decode(&b).unwrap(), s);
    }

    #[test]
    fn overflowing_index_is_rejected() {
        let mut s = stream(8);
        s.grid.indices[0] = 8;
        assert!(s.encode().is_err());
        let mut b = stream(8).encode().unwrap();
        b[20] = 9;
        assert!(matches!(TokenStream::decode(&b), Err(Error::Format(_))));
    }
}
