//! Little-endian binary formats: standalone tensor files and the byte
//! helpers shared with the checkpoint and query-message codecs.
//!
//! Tensor record layout:
//!
//! ```text
//! magic "ABT1" | version u16 = 1 | dtype u8 (0 = f64, 1 = f32) | rank u8
//! reserved u64 = 0 | rank × u32 dims | row-major payload
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: [u8; 4] = *b"ABT1";
pub const TENSOR_VERSION: u16 = 1;
pub const TENSOR_HEADER_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Dtype {
    #[default]
    F64,
    F32,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F64 => 0,
            Dtype::F32 => 1,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Dtype::F64),
            1 => Ok(Dtype::F32),
            other => Err(Error::Dtype(other)),
        }
    }

    pub fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

/// Cursor over a byte slice that reports truncation with the full expected
/// length.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or_else(|| Error::DimOverflow("read length".into()))?;
        if end > self.buf.len() {
            return Err(Error::Truncated {
                expected: end,
                actual: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let avail = self.remaining().min(4);
        let got = &self.buf[self.pos..self.pos + avail];
        if got != &expected[..avail] {
            return Err(Error::BadMagic {
                expected,
                found: got.to_vec(),
            });
        }
        self.take(4)?;
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = n.checked_mul(8).ok_or_else(|| Error::DimOverflow("payload size".into()))?;
        let raw = self.take(bytes)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = n.checked_mul(4).ok_or_else(|| Error::DimOverflow("payload size".into()))?;
        let raw = self.take(bytes)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }
}

pub fn encoded_tensor_len(t: &Tensor, dtype: Dtype) -> usize {
    TENSOR_HEADER_LEN + 4 * t.rank() + dtype.width() * t.numel()
}

pub fn encode_tensor_into(out: &mut Vec<u8>, t: &Tensor, dtype: Dtype) -> Result<()> {
    let rank = u8::try_from(t.rank()).map_err(|_| Error::DimOverflow(format!("rank {}", t.rank())))?;
    out.reserve(encoded_tensor_len(t, dtype));
    out.extend_from_slice(&TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.push(dtype.code());
    out.push(rank);
    out.extend_from_slice(&0u64.to_le_bytes());
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::DimOverflow(format!("dimension {d}")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    match dtype {
        Dtype::F64 => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        Dtype::F32 => t
            .data()
            .iter()
            .for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
    }
    Ok(())
}

pub fn encode_tensor(t: &Tensor, dtype: Dtype) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    encode_tensor_into(&mut out, t, dtype)?;
    Ok(out)
}

pub(crate) fn decode_tensor_from(r: &mut Reader<'_>) -> Result<Tensor> {
    let start = r.position();
    r.magic(TENSOR_MAGIC)?;
    let version = r.u16()?;
    if version != TENSOR_VERSION {
        return Err(Error::Version {
            expected: TENSOR_VERSION,
            found: version,
        });
    }
    let dtype = Dtype::from_code(r.u8()?)?;
    let rank = r.u8()? as usize;
    let _reserved = r.u64()?;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32()? as usize);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::DimOverflow(format!("element count of {shape:?}")))?;
    let payload = numel
        .checked_mul(dtype.width())
        .ok_or_else(|| Error::DimOverflow(format!("payload of {shape:?}")))?;
    if payload > r.remaining() {
        return Err(Error::Truncated {
            expected: r.position() - start + payload,
            actual: r.position() - start + r.remaining(),
        });
    }
    let data = match dtype {
        Dtype::F64 => r.f64s(numel)?,
        Dtype::F32 => r.f32s(numel)?,
    };
    Tensor::new(&shape, data)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(bytes);
    let t = decode_tensor_from(&mut r)?;
    if r.remaining() != 0 {
        return Err(Error::Malformed(format!("{} trailing bytes", r.remaining())));
    }
    Ok(t)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    write_tensor_as(path, t, Dtype::F64)
}

pub fn write_tensor_as(path: impl AsRef<Path>, t: &Tensor, dtype: Dtype) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_tensor(t, dtype)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes)
}
