//! Versioned binary checkpoints.
//!
//! Layout: `<magic>\n`, a little-endian `u64` header length, a JSON header,
//! a `u64` tensor count, then each tensor as a `u64` length followed by its
//! `f32` values in little-endian order.

use std::io::{Read, Write};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub fn encode<H: Serialize>(magic: &str, header: &H, tensors: &[&[f32]]) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let floats: usize = tensors.iter().map(|t| t.len()).sum();
    let mut out = Vec::with_capacity(magic.len() + header.len() + 4 * floats + 16 + 8 * tensors.len());
    out.extend_from_slice(magic.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.len() as u64).to_le_bytes());
        for v in *t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn read_u64(reader: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    reader
        .read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated: {e}")))?;
    Ok(u64::from_le_bytes(buf))
}

pub fn decode<H: DeserializeOwned>(magic: &str, bytes: &[u8]) -> Result<(H, Vec<Vec<f32>>)> {
    let prefix = format!("{magic}\n");
    let Some(mut rest) = bytes.strip_prefix(prefix.as_bytes()) else {
        let found: String = String::from_utf8_lossy(&bytes[..bytes.len().min(24)])
            .chars()
            .take_while(|c| *c != '\n')
            .collect();
        return Err(Error::Checkpoint(format!("expected magic `{magic}`, found `{found}`")));
    };
    let header_len = read_u64(&mut rest)? as usize;
    if header_len > rest.len() {
        return Err(Error::Checkpoint("header length exceeds file".into()));
    }
    let (header, mut rest) = rest.split_at(header_len);
    let header: H = serde_json::from_slice(header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let count = read_u64(&mut rest)? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = read_u64(&mut rest)? as usize;
        if len.saturating_mul(4) > rest.len() {
            return Err(Error::Checkpoint("tensor length exceeds file".into()));
        }
        let (raw, tail) = rest.split_at(len * 4);
        tensors.push(
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        );
        rest = tail;
    }
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
    }
    Ok((header, tensors))
}

/// Copies decoded tensors into a module's state slots, checking shapes.
pub fn restore(slots: Vec<&mut [f32]>, tensors: Vec<Vec<f32>>) -> Result<()> {
    if slots.len() != tensors.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {}",
            slots.len(),
            tensors.len()
        )));
    }
    for (i, (slot, t)) in slots.into_iter().zip(tensors).enumerate() {
        if slot.len() != t.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {i}: expected {} values, found {}",
                slot.len(),
                t.len()
            )));
        }
        slot.copy_from_slice(&t);
    }
    Ok(())
}

pub fn write_file(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &std::path::Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_magic_check() {
        let a = vec![1.0f32, -2.5, f32::MIN_POSITIVE];
        let b = vec![0.0f32; 0];
        let bytes = encode("test-v1", &serde_json::json!({"k": 3}), &[&a, &b]).unwrap();
        let (header, tensors): (serde_json::Value, _) = decode("test-v1", &bytes).unwrap();
        assert_eq!(header["k"], 3);
        assert_eq!(tensors, vec![a, b]);
        let err = decode::<serde_json::Value>("other-v1", &bytes).unwrap_err();
        assert!(err.to_string().contains("test-v1"));
        assert!(decode::<serde_json::Value>("test-v1", &bytes[..bytes.len() - 1]).is_err());
    }
}
