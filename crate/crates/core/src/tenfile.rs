//! The `.ten` tensor file format.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic "TENS" | u32 version = 1 | u8 ndim | ndim x u64 dims | f32 data
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TENS";
pub const VERSION: u32 = 1;

pub fn encode(tensor: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(9 + 8 * tensor.dims().len() + 4 * tensor.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(tensor.dims().len() as u8);
    for &d in tensor.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in tensor.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let fail = |msg: String| Error::format(path, msg);
    if bytes.len() < 9 {
        return Err(fail(format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(fail(format!("bad magic {:?}", &bytes[..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let ndim = bytes[8] as usize;
    let header = 9 + 8 * ndim;
    if bytes.len() < header {
        return Err(fail("truncated dims".into()));
    }
    let dims: Vec<usize> = bytes[9..header]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| fail("dims overflow".into()))?;
    let expected = count
        .checked_mul(4)
        .and_then(|n| n.checked_add(header))
        .ok_or_else(|| fail("dims overflow".into()))?;
    if bytes.len() != expected {
        return Err(fail(format!(
            "expected {expected} bytes for dims {dims:?}, found {}",
            bytes.len()
        )));
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(dims, data).map_err(|e| fail(e.to_string()))
}

pub fn write(path: &Path, tensor: &Tensor) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, encode(tensor)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
