//! The `higda-tensor v1` dump format.
//!
//! Layout: one ASCII header line `higda-tensor v1 <rank> <dims...>\n`
//! followed by the payload as little-endian 64-bit floats in row-major order.
//! Used by checkpointing and embedding export.

use crate::error::{HigdaError, Result};
use crate::numerics::tensor::Tensor;
use std::io::Write;
use std::path::Path;

const MAGIC: &str = "higda-tensor";
const VERSION: &str = "v1";
/// Upper bound on elements accepted from an untrusted header (128 MiB payload).
const MAX_ELEMS: usize = 1 << 24;
const MAX_RANK: usize = 8;

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
    let header = format!("{} {} {} {}\n", MAGIC, VERSION, t.shape().len(), dims.join(" "));
    let mut out = Vec::with_capacity(header.len() + t.len() * 8);
    out.extend_from_slice(header.as_bytes());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parse a tensor dump. Rejects malformed headers, oversized shapes, and
/// payload length mismatches without panicking.
pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| HigdaError::Checkpoint("missing header line".into()))?;
    if nl > 256 {
        return Err(HigdaError::Checkpoint("header line too long".into()));
    }
    let header = std::str::from_utf8(&bytes[..nl])
        .map_err(|_| HigdaError::Checkpoint("header is not ASCII".into()))?;
    let mut tok = header.split_ascii_whitespace();
    match (tok.next(), tok.next()) {
        (Some(MAGIC), Some(VERSION)) => {}
        _ => return Err(HigdaError::Checkpoint("bad magic or version".into())),
    }
    let rank: usize = tok
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| HigdaError::Checkpoint("missing rank".into()))?;
    if rank > MAX_RANK {
        return Err(HigdaError::Checkpoint(format!("rank {} exceeds limit {}", rank, MAX_RANK)));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d: usize = tok
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| HigdaError::Checkpoint("missing dimension".into()))?;
        shape.push(d);
    }
    if tok.next().is_some() {
        return Err(HigdaError::Checkpoint("trailing tokens in header".into()));
    }
    let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).unwrap_or(usize::MAX);
    if n > MAX_ELEMS {
        return Err(HigdaError::Checkpoint(format!("element count {} exceeds limit", n)));
    }
    let payload = &bytes[nl + 1..];
    if payload.len() != n * 8 {
        return Err(HigdaError::Checkpoint(format!(
            "payload length {} does not match {} elements",
            payload.len(),
            n
        )));
    }
    let mut data = Vec::with_capacity(n);
    for chunk in payload.chunks_exact(8) {
        data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }
    Tensor::from_vec(&shape, data)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_tensor(t))?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    decode_tensor(&bytes)
}
