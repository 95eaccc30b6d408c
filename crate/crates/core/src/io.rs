//! Tensor files.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! offset  size      field
//! 0       4         magic "MTEN"
//! 4       1         version (1)
//! 5       1         rank r (>= 1)
//! 6       4·r       dimensions, u32 each
//! 6+4r    8·Π dims  row-major IEEE-754 f64 values
//! ```
//!
//! A JSON form `{"shape": [...], "data": [...]}` is accepted wherever a
//! tensor file is read.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MTEN";
pub const VERSION: u8 = 1;
const HEADER: usize = 6;

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset,
        message: message.into(),
    }
}

pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    let rank = u8::try_from(t.rank()).map_err(|_| format_err(5, "rank exceeds 255"))?;
    let mut out = Vec::with_capacity(HEADER + 4 * t.rank() + 8 * t.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(rank);
    for (i, &d) in t.shape().iter().enumerate() {
        let d = u32::try_from(d).map_err(|_| format_err(HEADER + 4 * i, format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < HEADER {
        return Err(format_err(
            bytes.len(),
            format!("truncated header: expected {HEADER} bytes, got {}", bytes.len()),
        ));
    }
    if &bytes[..4] != MAGIC {
        return Err(format_err(0, "bad magic, expected \"MTEN\""));
    }
    if bytes[4] != VERSION {
        return Err(format_err(4, format!("unsupported version {}", bytes[4])));
    }
    let rank = bytes[5] as usize;
    if rank == 0 {
        return Err(format_err(5, "rank must be at least 1"));
    }
    let dims_end = HEADER + 4 * rank;
    if bytes.len() < dims_end {
        return Err(format_err(
            bytes.len(),
            format!("truncated dimensions: expected {dims_end} bytes, got {}", bytes.len()),
        ));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut count: usize = 1;
    for i in 0..rank {
        let off = HEADER + 4 * i;
        let d = u32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes")) as usize;
        if d == 0 {
            return Err(format_err(off, "zero dimension"));
        }
        count = count
            .checked_mul(d)
            .filter(|c| c.checked_mul(8).is_some())
            .ok_or_else(|| format_err(off, "dimension product overflows"))?;
        shape.push(d);
    }
    let expected = dims_end + 8 * count;
    if bytes.len() != expected {
        let what = if bytes.len() < expected { "truncated payload" } else { "trailing bytes" };
        return Err(format_err(
            bytes.len().min(expected),
            format!("{what}: expected {expected} bytes, got {}", bytes.len()),
        ));
    }
    let data = bytes[dims_end..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(shape, data)
}

/// Reads a binary or JSON tensor, chosen by content.
pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let bytes = fs::read(path.as_ref())?;
    if bytes.starts_with(MAGIC) {
        decode_tensor(&bytes)
    } else {
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// Writes JSON when the path ends in `.json`, the binary format otherwise.
pub fn save_tensor(tensor: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e == "json") {
        fs::write(path, serde_json::to_vec(tensor)?)?;
    } else {
        fs::write(path, encode_tensor(tensor)?)?;
    }
    Ok(())
}

pub fn load_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path.as_ref())?)?)
}

pub fn save_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path.as_ref(), text)?;
    Ok(())
}
