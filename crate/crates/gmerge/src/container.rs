//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! bytes 0..8    magic  b"GMRG0001"
//! bytes 8..16   u64 header length N
//! bytes 16..16+N  UTF-8 JSON: {"<layer>": {"dtype": "f32"|"f64",
//!                  "shape": [u64, ...], "offset": u64, "nbytes": u64}, ...}
//! bytes 16+N..  payload, tensors tightly packed in lexicographic layer
//!               order; offsets are relative to the payload start
//! ```
//!
//! Writes are atomic: the file is staged in a temporary sibling and renamed
//! into place, so a failed write never leaves a partial container behind.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Checkpoint, DType, Tensor, TensorError};

/// First eight bytes of every container file.
pub const MAGIC: &[u8; 8] = b"GMRG0001";

const HEADER_START: usize = 16;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("bad magic at byte 0: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 8], found: Vec<u8> },
    #[error("truncated at byte {offset}: needed {needed} bytes for {what}, only {available} available")]
    Truncated {
        what: &'static str,
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("header is not valid JSON (bytes 16..{header_end}): {source}")]
    HeaderJson {
        header_end: usize,
        source: serde_json::Error,
    },
    #[error("layer '{layer}': shape {shape:?} implies {expected} bytes but header declares {declared}")]
    ShapeMismatch {
        layer: String,
        shape: Vec<u64>,
        expected: u64,
        declared: u64,
    },
    #[error("layer '{layer}': payload range {start}..{end} (absolute bytes) exceeds file of {file_len} bytes")]
    PayloadOutOfBounds {
        layer: String,
        start: usize,
        end: usize,
        file_len: usize,
    },
    #[error("layer '{layer}': {source}")]
    BadTensor {
        layer: String,
        source: TensorError,
    },
    #[error("layer '{layer}': refusing to serialize non-finite scalar at flat index {index}")]
    NonFinite { layer: String, index: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct HeaderEntry {
    dtype: DType,
    shape: Vec<u64>,
    offset: u64,
    nbytes: u64,
}

/// Serializes a checkpoint into the container byte format.
pub fn container_to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>, ContainerError> {
    let mut header = BTreeMap::new();
    let mut payload = Vec::new();
    for (name, tensor) in ckpt.iter() {
        if let Some(index) = tensor.data().iter().position(|v| !v.is_finite()) {
            return Err(ContainerError::NonFinite {
                layer: name.to_string(),
                index,
            });
        }
        let offset = payload.len() as u64;
        match tensor.dtype() {
            DType::F32 => {
                for v in tensor.data() {
                    payload.extend_from_slice(&(*v as f32).to_le_bytes());
                }
            }
            DType::F64 => {
                for v in tensor.data() {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        header.insert(
            name.to_string(),
            HeaderEntry {
                dtype: tensor.dtype(),
                shape: tensor.shape().iter().map(|&e| e as u64).collect(),
                offset,
                nbytes: payload.len() as u64 - offset,
            },
        );
    }
    let header_json = serde_json::to_vec(&header).expect("header serialization cannot fail");
    let mut out = Vec::with_capacity(HEADER_START + header_json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parses a container from a byte buffer. Errors carry the byte offset of
/// the problem so corrupt files can be diagnosed without a hex dump.
pub fn container_from_bytes(bytes: &[u8]) -> Result<Checkpoint, ContainerError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(ContainerError::BadMagic {
            expected: *MAGIC,
            found: bytes[..bytes.len().min(MAGIC.len())].to_vec(),
        });
    }
    if bytes.len() < HEADER_START {
        return Err(ContainerError::Truncated {
            what: "header length",
            offset: MAGIC.len(),
            needed: 8,
            available: bytes.len() - MAGIC.len(),
        });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let header_len = usize::try_from(header_len).map_err(|_| ContainerError::Truncated {
        what: "header",
        offset: HEADER_START,
        needed: usize::MAX,
        available: bytes.len() - HEADER_START,
    })?;
    let header_end = HEADER_START
        .checked_add(header_len)
        .ok_or(ContainerError::Truncated {
            what: "header",
            offset: HEADER_START,
            needed: header_len,
            available: bytes.len() - HEADER_START,
        })?;
    if bytes.len() < header_end {
        return Err(ContainerError::Truncated {
            what: "header",
            offset: HEADER_START,
            needed: header_len,
            available: bytes.len() - HEADER_START,
        });
    }
    let header: BTreeMap<String, HeaderEntry> =
        serde_json::from_slice(&bytes[HEADER_START..header_end])
            .map_err(|source| ContainerError::HeaderJson { header_end, source })?;

    let payload = &bytes[header_end..];
    let mut ckpt = Checkpoint::new();
    for (layer, entry) in header {
        let count = entry
            .shape
            .iter()
            .try_fold(1u64, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| ContainerError::BadTensor {
                layer: layer.clone(),
                source: TensorError::ShapeOverflow,
            })?;
        let expected = count
            .checked_mul(entry.dtype.size() as u64)
            .ok_or_else(|| ContainerError::BadTensor {
                layer: layer.clone(),
                source: TensorError::ShapeOverflow,
            })?;
        if expected != entry.nbytes {
            return Err(ContainerError::ShapeMismatch {
                layer,
                shape: entry.shape,
                expected,
                declared: entry.nbytes,
            });
        }
        let start = usize::try_from(entry.offset).unwrap_or(usize::MAX);
        let end = start.saturating_add(usize::try_from(entry.nbytes).unwrap_or(usize::MAX));
        if end > payload.len() || start > payload.len() {
            return Err(ContainerError::PayloadOutOfBounds {
                layer,
                start: header_end.saturating_add(start),
                end: header_end.saturating_add(end),
                file_len: bytes.len(),
            });
        }
        let raw = &payload[start..end];
        let data: Vec<f64> = match entry.dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
                .collect(),
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        let shape: Vec<usize> = entry.shape.iter().map(|&e| e as usize).collect();
        let tensor = Tensor::new(entry.dtype, shape, data).map_err(|source| {
            ContainerError::BadTensor {
                layer: layer.clone(),
                source,
            }
        })?;
        ckpt.insert(layer, tensor);
    }
    Ok(ckpt)
}

/// Writes a checkpoint to `path` atomically (temp file + rename).
pub fn write_container(ckpt: &Checkpoint, path: &Path) -> Result<(), ContainerError> {
    let bytes = container_to_bytes(ckpt)?;
    atomic_write(path, &bytes).map_err(|source| ContainerError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Reads a checkpoint from a container file.
pub fn read_container(path: &Path) -> Result<Checkpoint, ContainerError> {
    let bytes = fs::read(path).map_err(|source| ContainerError::Io {
        path: path.display().to_string(),
        source,
    })?;
    container_from_bytes(&bytes)
}

/// Stages `bytes` in a temporary sibling of `path` and renames it into
/// place, so readers never observe a half-written file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}
