//! Single-file tensor container.
//!
//! Layout: an 8-byte little-endian header length `H`, then `H` bytes of UTF-8
//! JSON, then the tensor payload. Each header entry names a tensor, its shape,
//! and the byte range of its little-endian f64 values relative to the start
//! of the payload. Arbitrary JSON metadata rides along under `meta`.

use super::Tensor;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const FORMAT: &str = "relcon-tensors";
pub const VERSION: u32 = 1;
const MAX_HEADER: u64 = 64 << 20;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    endianness: String,
    dtype: String,
    tensors: Vec<Entry>,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: [usize; 2],
    offset: u64,
    length: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            tensors: Vec::new(),
            meta,
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            let length = (t.len() * 8) as u64;
            entries.push(Entry {
                name: name.clone(),
                shape: t.shape(),
                offset,
                length,
            });
            offset += length;
        }
        let header = Header {
            format: FORMAT.to_string(),
            version: VERSION,
            endianness: "little".to_string(),
            dtype: "f64".to_string(),
            tensors: entries,
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(8 + json.len() + offset as usize);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses a checkpoint. Every malformed input yields an error, never a panic.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Checkpoint("file shorter than the length prefix".into()));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        if header_len > MAX_HEADER || header_len > (bytes.len() - 8) as u64 {
            return Err(Error::Checkpoint(format!(
                "header length {header_len} exceeds file size {}",
                bytes.len()
            )));
        }
        let header_end = 8 + header_len as usize;
        let header: Header = serde_json::from_slice(&bytes[8..header_end])
            .map_err(|e| Error::Checkpoint(format!("corrupt header: {e}")))?;
        if header.format != FORMAT || header.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format {} v{}",
                header.format, header.version
            )));
        }
        if header.endianness != "little" || header.dtype != "f64" {
            return Err(Error::Checkpoint(format!(
                "unsupported encoding {}/{}",
                header.endianness, header.dtype
            )));
        }
        let payload = &bytes[header_end..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let count = e.shape[0]
                .checked_mul(e.shape[1])
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{}` shape overflows", e.name)))?;
            if e.length != count as u64 {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}`: shape {:?} needs {count} bytes, header says {}",
                    e.name, e.shape, e.length
                )));
            }
            let end = e
                .offset
                .checked_add(e.length)
                .filter(|&end| end <= payload.len() as u64)
                .ok_or_else(|| {
                    Error::Checkpoint(format!("tensor `{}` extends past end of file", e.name))
                })?;
            let raw = &payload[e.offset as usize..end as usize];
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((e.name, Tensor::new(e.shape[0], e.shape[1], data)?));
        }
        Ok(Self {
            tensors,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path.as_ref()).map_err(|source| Error::File {
            path: path.as_ref().to_path_buf(),
            source,
        })?)
    }
}
