//! `SCDT1` raw tensor files.
//!
//! Layout: the 8-byte magic `SCDT1\0\0\0`, an ASCII line `rank d0 d1 ... \n`
//! listing `rank` dimension sizes, then `product(dims)` little-endian `f32`
//! values in row-major order.

use std::fs;
use std::path::Path;

use super::{numel, Float, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SCDT1\0\0\0";

pub fn encode<T: Float>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * t.len());
    out.extend_from_slice(MAGIC);
    let mut header = t.rank().to_string();
    for d in t.shape() {
        header.push(' ');
        header.push_str(&d.to_string());
    }
    header.push('\n');
    out.extend_from_slice(header.as_bytes());
    for v in t.data() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("missing SCDT1 magic".into()));
    }
    let rest = &bytes[MAGIC.len()..];
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("SCDT1 header line not terminated".into()))?;
    let header = std::str::from_utf8(&rest[..nl]).map_err(|_| Error::Format("SCDT1 header is not ASCII".into()))?;
    let fields = header
        .split_ascii_whitespace()
        .map(|s| s.parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Format(format!("SCDT1 header `{header}`: {e}")))?;
    let (&rank, dims) = fields
        .split_first()
        .ok_or_else(|| Error::Format("empty SCDT1 header".into()))?;
    if dims.len() != rank {
        return Err(Error::Format(format!(
            "SCDT1 header declares rank {rank} but lists {} dims",
            dims.len()
        )));
    }
    let payload = &rest[nl + 1..];
    let count = numel(dims);
    if payload.len() != 4 * count {
        return Err(Error::Format(format!(
            "SCDT1 payload has {} bytes, shape {dims:?} needs {}",
            payload.len(),
            4 * count
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(dims, data)
}

pub fn write<T: Float>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    fs::write(path, encode(t))?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    decode(&fs::read(path)?)
}
