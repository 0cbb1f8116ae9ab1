//! Checkpoint container: a JSON header describing named f64 tensors followed
//! by their raw little-endian payload.
//!
//! Layout: `magic (8 bytes) | header_len (u64 LE) | header JSON | payload`.
//! Tensors are stored sorted by name and the header JSON uses sorted object
//! keys, so save -> load -> save is byte-identical.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const MAGIC: &[u8; 8] = b"TNSRPK01";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a parameter container (bad magic)")]
    BadMagic,
    #[error("corrupt container: {0}")]
    Corrupt(String),
    #[error("unsupported container version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("header is not valid JSON: {0}")]
    Header(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug)]
pub struct Container {
    pub meta: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

impl Container {
    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

pub fn save_container(
    path: &Path,
    meta: &serde_json::Value,
    tensors: &[(String, Vec<usize>, Vec<f64>)],
) -> Result<(), ContainerError> {
    let mut sorted: Vec<&(String, Vec<usize>, Vec<f64>)> = tensors.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));

    let mut entries = Vec::with_capacity(sorted.len());
    let mut offset = 0usize;
    for (name, shape, data) in &sorted {
        let count: usize = shape.iter().product();
        if count != data.len() {
            return Err(ContainerError::Corrupt(format!(
                "tensor `{name}`: shape {shape:?} does not match {} values",
                data.len()
            )));
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset,
            count,
        });
        offset += count;
    }
    let header = Header {
        version: FORMAT_VERSION,
        meta: meta.clone(),
        tensors: entries,
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let mut file = std::fs::File::create(path)?;
    file.write_all(MAGIC)?;
    file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    let mut payload = Vec::with_capacity(offset * 8);
    for (_, _, data) in &sorted {
        for v in data.iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    file.write_all(&payload)?;
    Ok(())
}

pub fn load_container(path: &Path) -> Result<Container, ContainerError> {
    let mut file = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(ContainerError::BadMagic);
    }
    let header_len =
        u64::from_le_bytes(bytes[8..16].try_into().expect("fixed slice")) as usize;
    let header_end = 16 + header_len;
    if bytes.len() < header_end {
        return Err(ContainerError::Corrupt("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[16..header_end])?;
    if header.version != FORMAT_VERSION {
        return Err(ContainerError::Version {
            found: header.version,
            expected: FORMAT_VERSION,
        });
    }
    let payload = &bytes[header_end..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let start = entry.offset * 8;
        let end = start + entry.count * 8;
        if end > payload.len() {
            return Err(ContainerError::Corrupt(format!(
                "tensor `{}` exceeds payload",
                entry.name
            )));
        }
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        tensors.push(NamedTensor {
            name: entry.name.clone(),
            shape: entry.shape.clone(),
            data,
        });
    }
    Ok(Container {
        meta: header.meta,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<(String, Vec<usize>, Vec<f64>)> {
        vec![
            ("base/w".into(), vec![2, 2], vec![1.0, -2.5, 3.25, 0.0]),
            ("adapter/u".into(), vec![3], vec![0.1, 0.2, 0.3]),
        ]
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let meta = serde_json::json!({"stage": "test", "seed": 7});
        save_container(&p1, &meta, &sample()).unwrap();
        let loaded = load_container(&p1).unwrap();
        let back: Vec<(String, Vec<usize>, Vec<f64>)> = loaded
            .tensors
            .iter()
            .map(|t| (t.name.clone(), t.shape.clone(), t.data.clone()))
            .collect();
        save_container(&p2, &loaded.meta, &back).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn corrupt_file_errors_without_panic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ckpt");
        std::fs::write(&p, b"not a checkpoint at all").unwrap();
        assert!(matches!(load_container(&p), Err(ContainerError::BadMagic)));
    }

    #[test]
    fn version_mismatch_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.ckpt");
        let meta = serde_json::json!(null);
        save_container(&p, &meta, &sample()).unwrap();
        // rewrite the version field inside the header
        let mut bytes = std::fs::read(&p).unwrap();
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header = String::from_utf8(bytes[16..16 + header_len].to_vec()).unwrap();
        let hacked = header.replace("\"version\":1", "\"version\":9");
        assert_ne!(header, hacked);
        bytes.splice(16..16 + header_len, hacked.into_bytes());
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(
            load_container(&p),
            Err(ContainerError::Version { found: 9, .. })
        ));
    }
}
