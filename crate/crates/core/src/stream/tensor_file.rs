//! Binary tensor files.
//!
//! ```text
//! "RCPT" | u16 version = 1 | u8 dtype (0 = f32, 1 = f64) | u8 ndim
//!        | ndim × u64 dims | row-major payload
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numkern::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"RCPT";
pub const TENSOR_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

pub fn encode_tensor(t: &Tensor, dtype: DType) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * t.ndim() + dtype.width() * t.numel());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.push(dtype as u8);
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match dtype {
        DType::F64 => {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        DType::F32 => {
            for v in t.data() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
    }
    out
}

/// Decodes one tensor record from the front of `bytes`; returns the tensor
/// and the number of bytes consumed. `base` offsets error positions when the
/// record is embedded in a larger file.
pub fn decode_tensor_at(bytes: &[u8], base: u64) -> Result<(Tensor, usize)> {
    let fail = |at: usize, why: &str| Error::format(base + at as u64, why.to_string());
    if bytes.len() < 8 {
        return Err(fail(bytes.len().min(4), "truncated tensor header"));
    }
    if &bytes[..4] != TENSOR_MAGIC {
        return Err(fail(0, "bad tensor magic, expected \"RCPT\""));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != TENSOR_VERSION {
        return Err(fail(4, &format!("unsupported tensor version {version}")));
    }
    let dtype = match bytes[6] {
        0 => DType::F32,
        1 => DType::F64,
        other => return Err(fail(6, &format!("unknown dtype tag {other}"))),
    };
    let ndim = bytes[7] as usize;
    let mut pos = 8;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let Some(chunk) = bytes.get(pos..pos + 8) else {
            return Err(fail(pos, "truncated dimension list"));
        };
        let d = u64::from_le_bytes(chunk.try_into().expect("8-byte slice"));
        shape.push(usize::try_from(d).map_err(|_| fail(pos, "dimension overflows usize"))?);
        pos += 8;
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| fail(8, "element count overflows"))?;
    let need = numel
        .checked_mul(dtype.width())
        .ok_or_else(|| fail(8, "payload size overflows"))?;
    let Some(payload) = bytes.get(pos..pos + need) else {
        return Err(fail(bytes.len(), "truncated payload"));
    };
    let data: Vec<f64> = match dtype {
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect(),
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
            .collect(),
    };
    let t = Tensor::new(shape, data).map_err(|e| fail(pos, &e.to_string()))?;
    Ok((t, pos + need))
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let (t, used) = decode_tensor_at(bytes, 0)?;
    if used != bytes.len() {
        return Err(Error::format(used as u64, "trailing bytes after tensor payload"));
    }
    Ok(t)
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    save_tensor_as(path, t, DType::F64)
}

pub fn save_tensor_as(path: impl AsRef<Path>, t: &Tensor, dtype: DType) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_tensor(t, dtype)).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes)
}
