//! Parameter snapshot container.
//!
//! | bytes | content                                   |
//! |-------|-------------------------------------------|
//! | 8     | magic `OSMDSNAP`                          |
//! | 4     | format version (`u32` LE, currently 1)    |
//! | 8     | header length `n` (`u64` LE)              |
//! | n     | UTF-8 JSON [`SnapshotHeader`]             |
//! | rest  | tensors as `f64` LE, in header order      |
//!
//! The header lists each tensor's name and shape, the config digest, the step
//! counter, a metric record and free-form extra state; `checksum` is the SHA-256
//! of the tensor bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"OSMDSNAP";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotHeader {
    pub config_digest: String,
    pub step: u64,
    #[serde(default)]
    pub metrics: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub extra: serde_json::Value,
    pub checksum: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub config_digest: String,
    pub step: u64,
    pub metrics: serde_json::Value,
    pub params: ParamStore,
    pub extra: serde_json::Value,
}

impl Snapshot {
    pub fn new(config_digest: impl Into<String>, step: u64, params: ParamStore) -> Self {
        Snapshot {
            config_digest: config_digest.into(),
            step,
            metrics: serde_json::Value::Null,
            params,
            extra: serde_json::Value::Null,
        }
    }

    fn body(&self) -> Vec<u8> {
        let mut body = Vec::new();
        for (_, t) in self.params.iter() {
            for v in t.data() {
                body.extend_from_slice(&v.to_le_bytes());
            }
        }
        body
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let body = self.body();
        let header = SnapshotHeader {
            config_digest: self.config_digest.clone(),
            step: self.step,
            metrics: self.metrics.clone(),
            tensors: self
                .params
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            extra: self.extra.clone(),
            checksum: hex::encode(Sha256::digest(&body)),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + body.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&body);
        out
    }

    /// Writes to a sibling temporary file first, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("partial");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|d| Error::format(path, d))
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err("bad magic".into());
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(format!("unsupported version {}", version));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let hend = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or("truncated header")?;
        let header: SnapshotHeader =
            serde_json::from_slice(&bytes[20..hend]).map_err(|e| format!("header: {}", e))?;
        let body = &bytes[hend..];
        if hex::encode(Sha256::digest(body)) != header.checksum {
            return Err("checksum mismatch".into());
        }
        let mut params = ParamStore::new();
        let mut pos = 0;
        for entry in &header.tensors {
            let n: usize = entry.shape.iter().product();
            let chunk = body.get(pos..pos + 8 * n).ok_or("truncated body")?;
            pos += 8 * n;
            let data = chunk
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(entry.shape.clone(), data).map_err(|e| e.to_string())?;
            params.insert(entry.name.clone(), t);
        }
        if pos != body.len() {
            return Err("trailing bytes after tensors".into());
        }
        Ok(Snapshot {
            config_digest: header.config_digest,
            step: header.step,
            metrics: header.metrics,
            params,
            extra: header.extra,
        })
    }

    /// SHA-256 of the serialized snapshot.
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}
