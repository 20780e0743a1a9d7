//! Checkpoint serialization: named f64 tensors with a JSON header.
//!
//! Layout: `[u64 little-endian header length][header JSON][raw f64 LE data]`.
//! The header lists tensor names and shapes in storage order plus the seed
//! and a config hash, so loads can verify they match the run that produced
//! the file. Writes are atomic (temp file + rename).

use crate::error::{FlowError, Result};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// One named tensor; `data.len()` must equal the shape product.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorEntry {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(FlowError::shape(format!(
                "tensor data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(TensorEntry {
            name: name.into(),
            shape,
            data,
        })
    }
}

/// Header stored as JSON at the front of a checkpoint file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub seed: u64,
    pub config_hash: String,
    pub tensors: Vec<TensorMeta>,
}

/// Name and shape of one stored tensor.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Serializes tensors to `path` atomically.
pub fn save_checkpoint(
    path: &Path,
    seed: u64,
    config_hash: &str,
    tensors: &[TensorEntry],
) -> Result<()> {
    let header = CheckpointHeader {
        format_version: 1,
        seed,
        config_hash: config_hash.to_string(),
        tensors: tensors
            .iter()
            .map(|t| TensorMeta {
                name: t.name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| FlowError::Input(format!("header serialization: {e}")))?;

    let mut buf = Vec::with_capacity(header_bytes.len() + 8);
    buf.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    for t in tensors {
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    let tmp = path.with_extension("tmp-write");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Loads a checkpoint; shapes are validated against the payload size.
pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, Vec<TensorEntry>)> {
    let mut f = std::fs::File::open(path)?;
    let mut len_bytes = [0u8; 8];
    f.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    f.read_exact(&mut header_bytes)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| FlowError::Parse {
            line: 1,
            msg: format!("checkpoint header: {e}"),
        })?;
    let mut rest = Vec::new();
    f.read_to_end(&mut rest)?;

    let total: usize = header
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>())
        .sum();
    if rest.len() != total * 8 {
        return Err(FlowError::shape(format!(
            "checkpoint payload is {} bytes, header implies {}",
            rest.len(),
            total * 8
        )));
    }

    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut at = 0;
    for meta in &header.tensors {
        let n: usize = meta.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let mut b = [0u8; 8];
            b.copy_from_slice(&rest[at..at + 8]);
            data.push(f64::from_le_bytes(b));
            at += 8;
        }
        tensors.push(TensorEntry {
            name: meta.name.clone(),
            shape: meta.shape.clone(),
            data,
        });
    }
    Ok((header, tensors))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_exact_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let tensors = vec![
            TensorEntry::new("a.w", vec![2, 3], vec![1.0, -2.5, 3.25, 0.1, f64::MIN_POSITIVE, 9.9]).unwrap(),
            TensorEntry::new("a.b", vec![2], vec![0.0, -0.0]).unwrap(),
        ];
        save_checkpoint(&path, 42, "deadbeef", &tensors).unwrap();
        let (header, loaded) = load_checkpoint(&path).unwrap();
        assert_eq!(header.seed, 42);
        assert_eq!(header.config_hash, "deadbeef");
        assert_eq!(loaded.len(), 2);
        for (orig, back) in tensors.iter().zip(&loaded) {
            assert_eq!(orig.name, back.name);
            assert_eq!(orig.shape, back.shape);
            for (x, y) in orig.data.iter().zip(&back.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn shape_mismatch_rejected_on_create() {
        assert!(TensorEntry::new("bad", vec![2, 2], vec![1.0]).is_err());
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let tensors = vec![TensorEntry::new("t", vec![4], vec![1.0; 4]).unwrap()];
        save_checkpoint(&path, 0, "h", &tensors).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn save_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let tensors = vec![TensorEntry::new("t", vec![3], vec![0.1, 0.2, 0.3]).unwrap()];
        save_checkpoint(&p1, 7, "h", &tensors).unwrap();
        save_checkpoint(&p2, 7, "h", &tensors).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}
