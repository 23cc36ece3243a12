//! Binary container for parameter checkpoints and attention dumps.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "CAPVIDCK"
//! version  u32
//! header   u32 length + UTF-8 JSON
//! count    u32
//! entries  count x {
//!     name       u32 length + UTF-8
//!     ndim       u8
//!     dims       ndim x u64
//!     projection u8 (0 or 1)
//!     data       prod(dims) x f32
//! }
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::{AttentionRecord, AttnKey, Denoiser, ModelConfig};
use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamStore};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"CAPVIDCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub projection: bool,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: serde_json::Value,
    pub entries: Vec<Entry>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Format(e.to_string()))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Container {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.header.to_string());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            put_str(&mut out, &e.name);
            out.push(e.shape.len() as u8);
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.push(e.projection as u8);
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let header = serde_json::from_str(&r.string()?).map_err(|e| Error::Format(e.to_string()))?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let ndim = r.u8()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let projection = match r.u8()? {
                0 => false,
                1 => true,
                b => return Err(Error::Format(format!("{name}: projection tag {b}"))),
            };
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("size overflow".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            entries.push(Entry {
                name,
                shape,
                projection,
                data,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { header, entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::path(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::path(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::path(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn entry(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    kind: String,
    model: ModelConfig,
    param_kinds: BTreeMap<String, ParamKind>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// Serializes every parameter as `f32` with the model config in the header.
pub fn checkpoint_container<T: Scalar>(model: &Denoiser<T>, meta: serde_json::Value) -> Container {
    let store = model.params();
    let header = CheckpointHeader {
        kind: "denoiser".into(),
        model: model.config().clone(),
        param_kinds: store.iter().map(|(_, p)| (p.name.clone(), p.kind)).collect(),
        meta,
    };
    Container {
        header: serde_json::to_value(header).expect("header serializes"),
        entries: store
            .iter()
            .map(|(_, p)| Entry {
                name: p.name.clone(),
                shape: vec![p.value.nrows(), p.value.ncols()],
                projection: p.projection,
                data: p.value.iter().map(|v| v.as_f32()).collect(),
            })
            .collect(),
    }
}

pub fn save_checkpoint<T: Scalar>(model: &Denoiser<T>, meta: serde_json::Value, path: &Path) -> Result<()> {
    checkpoint_container(model, meta).write(path)
}

/// Rebuilds a model and returns the header's free-form metadata.
pub fn model_from_container<T: Scalar>(c: &Container) -> Result<(Denoiser<T>, serde_json::Value)> {
    let header: CheckpointHeader =
        serde_json::from_value(c.header.clone()).map_err(|e| Error::Format(e.to_string()))?;
    if header.kind != "denoiser" {
        return Err(Error::Format(format!(
            "container holds `{}`, not a denoiser",
            header.kind
        )));
    }
    let mut store = ParamStore::new();
    for e in &c.entries {
        let [r, cols] = e.shape[..] else {
            return Err(Error::Format(format!("{}: parameters are 2-D", e.name)));
        };
        let kind = *header
            .param_kinds
            .get(&e.name)
            .ok_or_else(|| Error::Format(format!("{}: no kind in header", e.name)))?;
        let value = Array2::from_shape_vec((r, cols), e.data.iter().map(|&v| T::lit(v as f64)).collect())
            .map_err(|err| Error::Format(err.to_string()))?;
        store.add(e.name.clone(), value, kind, e.projection);
    }
    Ok((Denoiser::from_store(header.model, store)?, header.meta))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(Denoiser<T>, serde_json::Value)> {
    model_from_container(&Container::read(path)?)
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path).map_err(|e| Error::path(path, e))?))
}

/// Attention maps keyed by [`AttnKey::dump_name`].
pub fn attention_container<T: Scalar>(records: &[AttentionRecord<T>], meta: serde_json::Value) -> Container {
    let index: Vec<String> = records.iter().map(|r| r.key.dump_name()).collect();
    Container {
        header: serde_json::json!({ "kind": "attention", "index": index, "meta": meta }),
        entries: records
            .iter()
            .map(|r| Entry {
                name: r.key.dump_name(),
                shape: r.map.shape().to_vec(),
                projection: false,
                data: r.map.iter().map(|v| v.as_f32()).collect(),
            })
            .collect(),
    }
}

pub fn records_from_container(c: &Container) -> Result<Vec<AttentionRecord<f32>>> {
    if c.header.get("kind").and_then(|k| k.as_str()) != Some("attention") {
        return Err(Error::Format("container is not an attention dump".into()));
    }
    c.entries
        .iter()
        .map(|e| {
            let key =
                AttnKey::parse_dump_name(&e.name).ok_or_else(|| Error::Format(format!("bad map name {}", e.name)))?;
            let [h, q, k] = e.shape[..] else {
                return Err(Error::Format(format!("{}: maps are 3-D", e.name)));
            };
            let map =
                Array3::from_shape_vec((h, q, k), e.data.clone()).map_err(|err| Error::Format(err.to_string()))?;
            Ok(AttentionRecord { key, map })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::AttnKind;

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let m = Denoiser::<f32>::init(ModelConfig::tiny(), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&m, serde_json::json!({"step": 3}), &path).unwrap();
        let (back, meta) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(meta["step"], 3);
        assert!(back.params().changed_since(m.params()).is_empty());
        for ((_, a), (_, b)) in m.params().iter().zip(back.params().iter()) {
            assert_eq!((a.kind, a.projection), (b.kind, b.projection));
        }
        let path2 = dir.path().join("again.ckpt");
        save_checkpoint(&back, serde_json::json!({"step": 3}), &path2).unwrap();
        assert_eq!(file_hash(&path).unwrap(), file_hash(&path2).unwrap());
    }

    #[test]
    fn corrupt_containers_rejected() {
        let m = Denoiser::<f32>::init(ModelConfig::tiny(), 4).unwrap();
        let bytes = checkpoint_container(&m, serde_json::Value::Null).to_bytes();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Container::from_bytes(&bad), Err(Error::Format(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(Container::from_bytes(&extra).is_err());
    }

    #[test]
    fn attention_dump_round_trip() {
        let rec = AttentionRecord {
            key: AttnKey::new(981, 1, 2, AttnKind::Cross),
            map: Array3::from_shape_fn((2, 3, 4), |(h, q, k)| (h + q + k) as f32 / 10.0),
        };
        let c = attention_container(std::slice::from_ref(&rec), serde_json::Value::Null);
        let back = records_from_container(&Container::from_bytes(&c.to_bytes()).unwrap()).unwrap();
        assert_eq!(back, vec![rec]);
    }
}
