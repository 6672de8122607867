//! Tensor blob files: magic `HQT1`, `u32` rank, `u32` dims, then row-major
//! little-endian `f32` values.

use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use hyquant_core::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"HQT1";

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    ensure!(
        bytes.len() >= 8 && &bytes[..4] == MAGIC,
        "not a tensor blob (missing HQT1 header)"
    );
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let rank = word(4) as usize;
    let header = 8 + 4 * rank;
    ensure!(bytes.len() >= header, "tensor blob header truncated");
    let shape: Vec<usize> = (0..rank).map(|i| word(8 + 4 * i) as usize).collect();
    let len = shape.iter().try_fold(1usize, |n, &d| n.checked_mul(d));
    let Some(len) = len else {
        bail!("tensor blob shape {shape:?} overflows");
    };
    ensure!(
        bytes.len() - header == 4 * len,
        "tensor blob holds {} payload bytes, shape {shape:?} needs {}",
        bytes.len() - header,
        4 * len
    );
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor::new(shape, data)?)
}

pub fn write(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode(t)).with_context(|| format!("writing {}", path.display()))
}

pub fn read(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    decode(&bytes).with_context(|| format!("decoding {}", path.display()))
}
