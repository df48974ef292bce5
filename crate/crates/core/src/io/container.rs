//! `OTSR` tensor container: magic, `u16` version, `u8` dtype, `u8` ndim,
//! `u32` dims and a row-major payload, all little-endian.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"OTSR";
pub const TENSOR_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            t => Err(Error::Format(format!("unknown dtype tag {t}"))),
        }
    }
}

pub fn encode_tensor(t: &Tensor, dtype: Dtype) -> Result<Vec<u8>> {
    if t.ndim() > u8::MAX as usize {
        return Err(Error::Format(format!("{} axes do not fit the header", t.ndim())));
    }
    let mut out = Vec::with_capacity(8 + 4 * t.ndim() + t.numel() * dtype.size());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.push(dtype as u8);
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    match dtype {
        Dtype::F32 => t.data().iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        Dtype::F64 => t.data().iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(out)
}

/// Decodes a container that must fill `bytes` exactly.
pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let (t, used) = decode_tensor_prefix(bytes)?;
    if used != bytes.len() {
        return Err(Error::Format(format!(
            "tensor container has {} trailing bytes",
            bytes.len() - used
        )));
    }
    Ok(t)
}

/// Decodes a container at the start of `bytes`; returns it and its length.
pub fn decode_tensor_prefix(bytes: &[u8]) -> Result<(Tensor, usize)> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != TENSOR_MAGIC {
        return Err(Error::Format("bad tensor container magic".into()));
    }
    let version = r.u16()?;
    if version != TENSOR_VERSION {
        return Err(Error::Format(format!("unsupported tensor container version {version}")));
    }
    let dtype = Dtype::from_tag(r.u8()?)?;
    let ndim = r.u8()? as usize;
    let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let n = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::Format("tensor size overflows".into()))?;
    let payload = n
        .checked_mul(dtype.size())
        .ok_or_else(|| Error::Format("tensor size overflows".into()))?;
    if r.remaining() < payload {
        return Err(Error::Format(format!(
            "tensor payload truncated: need {payload} bytes, have {}",
            r.remaining()
        )));
    }
    let raw = r.take(payload)?;
    let data = match dtype {
        Dtype::F32 => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        Dtype::F64 => raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    Ok((Tensor::new(&shape, data)?, r.pos))
}

/// Little-endian cursor over a byte slice.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Format(format!(
                "unexpected end of data at byte {} (need {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn rest(&self) -> &'a [u8] {
        &self.bytes[self.pos..]
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().expect("16 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    pub(crate) fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("string is not UTF-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f64_roundtrip_is_exact() {
        let t = Tensor::new(&[2, 3], vec![0.1, -2.5, 1e-300, 3.0, f64::MIN_POSITIVE, 7.0]).unwrap();
        let b = encode_tensor(&t, Dtype::F64).unwrap();
        assert_eq!(&b[..4], b"OTSR");
        assert_eq!(b.len(), 8 + 8 + 6 * 8);
        assert_eq!(decode_tensor(&b).unwrap(), t);
    }

    #[test]
    fn f32_header_layout() {
        let t = Tensor::new(&[1, 2], vec![1.0, -0.5]).unwrap();
        let b = encode_tensor(&t, Dtype::F32).unwrap();
        assert_eq!(&b[4..8], &[1, 0, 0, 2]);
        assert_eq!(&b[8..16], &[1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&b[16..20], &1.0f32.to_le_bytes());
        assert_eq!(decode_tensor(&b).unwrap(), t);
    }

    #[test]
    fn corrupt_containers_are_rejected() {
        let t = Tensor::ones(&[3]);
        let good = encode_tensor(&t, Dtype::F32).unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_tensor(&bad), Err(Error::Format(_))));
        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(decode_tensor(&bad), Err(Error::Format(_))));
        assert!(matches!(decode_tensor(&good[..good.len() - 1]), Err(Error::Format(_))));
        let mut long = good.clone();
        long.push(0);
        assert!(matches!(decode_tensor(&long), Err(Error::Format(_))));
        let mut bad = good;
        bad[6] = 7;
        assert!(matches!(decode_tensor(&bad), Err(Error::Format(_))));
    }
}
