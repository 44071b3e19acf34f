//! Tensor container used for checkpoints and prior caches.
//!
//! Layout: 8-byte magic, `u64` LE header length, JSON header, then a contiguous
//! little-endian `f32` payload. The header lists every tensor's name, dtype,
//! shape, byte offset and element count, plus free-form metadata, the format
//! version and a CRC-32 of the payload.

use std::io::Read;
use std::path::Path;

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"BFLOWTNS";
pub const VERSION: u32 = 1;
const PREFIX: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
    /// Element count.
    pub len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContainerHeader {
    pub version: u32,
    pub kind: String,
    pub tensors: Vec<TensorEntry>,
    pub meta: Value,
    pub payload_bytes: u64,
    pub checksum: u32,
}

impl ContainerHeader {
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|t| t.name.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: Value,
    pub tensors: IndexMap<String, ArrayD<f32>>,
}

impl Container {
    pub fn new(kind: impl Into<String>, meta: Value) -> Self {
        Container {
            kind: kind.into(),
            meta,
            tensors: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: ArrayD<f32>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn take(&mut self, name: &str) -> Result<ArrayD<f32>> {
        self.tensors
            .shift_remove(name)
            .ok_or_else(|| Error::Corrupt(format!("container has no tensor `{name}`")))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
                offset: payload.len() as u64,
                len: t.len() as u64,
            });
            for v in t.iter() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = ContainerHeader {
            version: VERSION,
            kind: self.kind.clone(),
            tensors: entries,
            meta: self.meta.clone(),
            payload_bytes: payload.len() as u64,
            checksum: crc32fast::hash(&payload),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(PREFIX + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (header, start) = parse_header(bytes)?;
        let payload = &bytes[start..];
        if (payload.len() as u64) < header.payload_bytes {
            return Err(Error::Corrupt(format!(
                "payload truncated: {} of {} bytes",
                payload.len(),
                header.payload_bytes
            )));
        }
        if payload.len() as u64 != header.payload_bytes {
            return Err(Error::Corrupt("trailing bytes after payload".into()));
        }
        if crc32fast::hash(payload) != header.checksum {
            return Err(Error::Corrupt("payload checksum mismatch".into()));
        }
        let mut tensors = IndexMap::new();
        for e in &header.tensors {
            if e.dtype != "f32" {
                return Err(Error::Corrupt(format!("unsupported dtype `{}` for `{}`", e.dtype, e.name)));
            }
            let n: usize = e.shape.iter().product();
            let end = e.offset.checked_add(e.len * 4).filter(|&end| end <= header.payload_bytes);
            if n as u64 != e.len || end.is_none() {
                return Err(Error::Corrupt(format!("tensor `{}` does not fit its declared extent", e.name)));
            }
            let raw = &payload[e.offset as usize..end.expect("checked") as usize];
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = ArrayD::from_shape_vec(IxDyn(&e.shape), data).expect("length checked");
            tensors.insert(e.name.clone(), t);
        }
        Ok(Container {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

fn parse_header(bytes: &[u8]) -> Result<(ContainerHeader, usize)> {
    if bytes.len() < PREFIX {
        return Err(Error::Corrupt("file shorter than the container prefix".into()));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Format("not a tensor container (bad magic)".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = PREFIX.checked_add(len).filter(|&e| e <= bytes.len());
    let Some(end) = end else {
        return Err(Error::Corrupt("header truncated".into()));
    };
    let header = decode_header(&bytes[PREFIX..end])?;
    Ok((header, end))
}

fn decode_header(json: &[u8]) -> Result<ContainerHeader> {
    let value: Value = serde_json::from_slice(json).map_err(|e| Error::Corrupt(format!("unreadable header: {e}")))?;
    let version = value.get("version").and_then(Value::as_u64).unwrap_or(0) as u32;
    if version != VERSION {
        return Err(Error::Incompatible {
            found: version,
            expected: VERSION,
        });
    }
    serde_json::from_value(value).map_err(|e| Error::Corrupt(format!("malformed header: {e}")))
}

/// Reads only the prefix and header of a container file.
pub fn read_header(path: impl AsRef<Path>) -> Result<ContainerHeader> {
    let path = path.as_ref();
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut prefix = [0u8; PREFIX];
    f.read_exact(&mut prefix)
        .map_err(|_| Error::Corrupt("file shorter than the container prefix".into()))?;
    if &prefix[..8] != MAGIC {
        return Err(Error::Format("not a tensor container (bad magic)".into()));
    }
    let len = u64::from_le_bytes(prefix[8..].try_into().expect("8 bytes"));
    let mut json = Vec::new();
    f.take(len)
        .read_to_end(&mut json)
        .map_err(|e| Error::io(path, e))?;
    if json.len() as u64 != len {
        return Err(Error::Corrupt("header truncated".into()));
    }
    decode_header(&json)
}
