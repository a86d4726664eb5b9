//! The "CDT1" binary tensor container.
//!
//! Layout: magic `CDT1`, one dtype byte (1 = f32, 2 = u8), one ndim byte,
//! `ndim` little-endian u32 dims, then the row-major little-endian payload.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CDT1";
const DTYPE_REAL32: u8 = 1;
const DTYPE_UINT8: u8 = 2;
const MAX_NDIM: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub enum StoredTensor {
    Real32(Tensor<f32>),
    Uint8(Tensor<u8>),
}

impl StoredTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::Real32(t) => t.shape(),
            StoredTensor::Uint8(t) => t.shape(),
        }
    }

    pub fn into_real32(self) -> Result<Tensor<f32>> {
        match self {
            StoredTensor::Real32(t) => Ok(t),
            StoredTensor::Uint8(_) => Err(Error::format(4, "expected real32 tensor, found uint8")),
        }
    }

    pub fn into_uint8(self) -> Result<Tensor<u8>> {
        match self {
            StoredTensor::Uint8(t) => Ok(t),
            StoredTensor::Real32(_) => Err(Error::format(4, "expected uint8 tensor, found real32")),
        }
    }
}

impl From<Tensor<f32>> for StoredTensor {
    fn from(t: Tensor<f32>) -> Self {
        StoredTensor::Real32(t)
    }
}

impl From<Tensor<u8>> for StoredTensor {
    fn from(t: Tensor<u8>) -> Self {
        StoredTensor::Uint8(t)
    }
}

pub fn header_len(ndim: usize) -> usize {
    4 + 1 + 1 + 4 * ndim
}

pub fn encode(tensor: &StoredTensor) -> Result<Vec<u8>> {
    let shape = tensor.shape();
    if shape.len() > MAX_NDIM {
        return Err(Error::Shape(format!("ndim {} exceeds {}", shape.len(), MAX_NDIM)));
    }
    let mut out = Vec::with_capacity(header_len(shape.len()));
    out.extend_from_slice(MAGIC);
    out.push(match tensor {
        StoredTensor::Real32(_) => DTYPE_REAL32,
        StoredTensor::Uint8(_) => DTYPE_UINT8,
    });
    out.push(shape.len() as u8);
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::Shape(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    match tensor {
        StoredTensor::Real32(t) => {
            out.reserve(t.len() * 4);
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        StoredTensor::Uint8(t) => out.extend_from_slice(t.data()),
    }
    Ok(out)
}

/// Decode a full container; trailing bytes are rejected.
pub fn decode(bytes: &[u8]) -> Result<StoredTensor> {
    let (tensor, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(Error::format(used, format!("{} trailing bytes", bytes.len() - used)));
    }
    Ok(tensor)
}

/// Decode one container from the front of `bytes`, returning bytes consumed.
pub fn decode_prefix(bytes: &[u8]) -> Result<(StoredTensor, usize)> {
    if bytes.len() < 4 {
        return Err(Error::format(bytes.len(), "truncated magic"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(
            0,
            format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..4])),
        ));
    }
    let dtype = *bytes.get(4).ok_or_else(|| Error::format(4, "truncated dtype"))?;
    if dtype != DTYPE_REAL32 && dtype != DTYPE_UINT8 {
        return Err(Error::format(4, format!("unknown dtype code {dtype}")));
    }
    let ndim = *bytes.get(5).ok_or_else(|| Error::format(5, "truncated ndim"))? as usize;
    if ndim > MAX_NDIM {
        return Err(Error::format(5, format!("ndim {ndim} exceeds {MAX_NDIM}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    let mut pos = 6;
    for _ in 0..ndim {
        let raw = bytes
            .get(pos..pos + 4)
            .ok_or_else(|| Error::format(pos, "truncated dimension"))?;
        shape.push(u32::from_le_bytes(raw.try_into().unwrap()) as usize);
        pos += 4;
    }
    let count: usize = shape.iter().product();
    let elem = if dtype == DTYPE_REAL32 { 4 } else { 1 };
    let need = count
        .checked_mul(elem)
        .ok_or_else(|| Error::format(6, "payload size overflows"))?;
    if bytes.len() - pos < need {
        return Err(Error::format(
            bytes.len(),
            format!("truncated payload: need {need} bytes, have {}", bytes.len() - pos),
        ));
    }
    let payload = &bytes[pos..pos + need];
    let tensor = if dtype == DTYPE_REAL32 {
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        StoredTensor::Real32(Tensor::from_vec(&shape, data)?)
    } else {
        StoredTensor::Uint8(Tensor::from_vec(&shape, payload.to_vec())?)
    };
    Ok((tensor, pos + need))
}

pub fn write(path: impl AsRef<Path>, tensor: &StoredTensor) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(tensor)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: impl AsRef<Path>) -> Result<StoredTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// 64-bit digest: the first eight bytes of SHA-256, little-endian.
pub fn digest64(bytes: &[u8]) -> u64 {
    let full = Sha256::digest(bytes);
    u64::from_le_bytes(full[..8].try_into().unwrap())
}

pub fn tensor_digest(tensor: &StoredTensor) -> u64 {
    digest64(&encode(tensor).expect("encodable tensor"))
}
