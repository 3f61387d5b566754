//! Binary tensor fixture format.
//!
//! Layout: magic bytes "VNSA", version byte 0x01, one byte rank, `rank`
//! little-endian u32 dims, then the row-major payload as little-endian
//! IEEE-754 f32. Loads reject non-finite values.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"VNSA";
pub const VERSION: u8 = 0x01;

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * t.dims().len() + 4 * t.len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(t.dims().len() as u8);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 6 {
        return Err(Error::Format("truncated header".into()));
    }
    if bytes[0..4] != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:02x?}, expected {:02x?}",
            &bytes[0..4],
            MAGIC
        )));
    }
    if bytes[4] != VERSION {
        return Err(Error::Format(format!(
            "unsupported version {}, expected {}",
            bytes[4], VERSION
        )));
    }
    let rank = bytes[5] as usize;
    let dims_end = 6 + 4 * rank;
    if bytes.len() < dims_end {
        return Err(Error::Format("truncated dims".into()));
    }
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 6 + 4 * i;
        dims.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
    }
    let count: usize = dims.iter().product();
    if bytes.len() != dims_end + 4 * count {
        return Err(Error::Format(format!(
            "payload length {} does not match dims {:?}",
            bytes.len() - dims_end,
            dims
        )));
    }
    let mut data = Vec::with_capacity(count);
    for i in 0..count {
        let off = dims_end + 4 * i;
        let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::Format(format!("non-finite value at index {i}")));
        }
        data.push(v);
    }
    Tensor::new(dims, data)
}

/// Whole-file write: temp file in the same directory, then rename.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Validation(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!("{}.tmp", file_name.to_string_lossy()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    write_atomic(path, &encode_tensor(t))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let bytes = fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    decode_tensor(&bytes)
}
