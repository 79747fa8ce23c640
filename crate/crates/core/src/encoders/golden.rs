//! Golden-tensor files for backend regression tests.
//!
//! Layout (little endian): magic `MGT1`, `u32` rank, `rank × u64` dims, then
//! `prod(dims)` `f64` values in row-major order.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MGT1";

pub fn encode(tensor: &ArrayD<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + tensor.ndim() * 8 + tensor.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(tensor.ndim() as u32).to_le_bytes());
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in tensor.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<ArrayD<f64>> {
    let bad = |msg: &str| Error::Encoding(format!("golden tensor: {msg}"));
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(bad("missing MGT1 header"));
    }
    let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let header = 8 + rank * 8;
    if bytes.len() < header {
        return Err(bad("truncated dims"));
    }
    let dims: Vec<usize> = bytes[8..header]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let count: usize = dims.iter().product();
    if bytes.len() != header + count * 8 {
        return Err(bad("payload length does not match dims"));
    }
    let values: Vec<f64> = bytes[header..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ArrayD::from_shape_vec(IxDyn(&dims), values).map_err(|e| bad(&e.to_string()))
}

pub fn write(path: &Path, tensor: &ArrayD<f64>) -> Result<()> {
    fs::write(path, encode(tensor)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read(path: &Path) -> Result<ArrayD<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode(&bytes)
}
