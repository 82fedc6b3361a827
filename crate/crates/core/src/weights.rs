//! Binary weights files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "WFPV" | u32 version | u32 header length | header JSON
//! | u32 tensor count | per tensor: u32 name length, name, u32 rank,
//!   u64 dims[rank], f64 values[∏dims]
//! | u32 CRC-32 of every preceding byte
//! ```
//!
//! The header holds the model kind, its metadata and the run configuration
//! that produced it.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::fsutil;
use crate::models::{ModelGraph, ModelKind, ModelMeta};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"WFPV";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: ModelKind,
    meta: ModelMeta,
    #[serde(default)]
    config: Value,
}

/// Serializes `model` with `config` echoed into the header.
pub fn encode(model: &ModelGraph, config: &Value) -> Vec<u8> {
    let header = Header {
        kind: *model.kind(),
        meta: model.meta,
        config: config.clone(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + model.param_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(model.weights().len() as u32).to_le_bytes());
    for (name, t) in model.weights() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Corrupt(format!("unexpected end of data at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Model and echoed configuration from encoded bytes.
pub fn decode(bytes: &[u8]) -> Result<(ModelGraph, Value)> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::Corrupt("missing WFPV magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Corrupt(format!("checksum {stored:08x} does not match {actual:08x}")));
    }
    let mut r = Reader { buf: body, pos: 8 };
    let hlen = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(hlen)?)
        .map_err(|e| Error::Corrupt(format!("bad header: {e}")))?;
    let count = r.u32()? as usize;
    let mut values = BTreeMap::new();
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Corrupt(format!("tensor {name} is too large")))?;
        let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Corrupt("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Corrupt(e.to_string()))?;
        values.insert(name, t);
    }
    if r.pos != body.len() {
        return Err(Error::Corrupt(format!("{} trailing bytes", body.len() - r.pos)));
    }
    let mut model = ModelGraph::build(header.kind, header.meta.seed).map_err(|e| Error::Corrupt(e.to_string()))?;
    model.load_values(&values).map_err(|e| Error::Corrupt(e.to_string()))?;
    model.meta = header.meta;
    Ok((model, header.config))
}

/// Writes `model` atomically to `path`.
pub fn save_weights(path: &Path, model: &ModelGraph, config: &Value) -> Result<()> {
    fsutil::write_atomic(path, &encode(model, config))
}

pub fn load_weights(path: &Path) -> Result<(ModelGraph, Value)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
