//! Checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"PDCK" | u32 version | u64 header_len | header JSON (UTF-8)
//! | param_count x f32 parameters, declaration order
//! | [optional] param_count x f64 Adam m | param_count x f64 Adam v
//! ```
//!
//! The JSON header echoes the training config and network shape and carries
//! an open `extensions` map (the diffusion layer stores its scene
//! normalization and noise schedule there).

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamState, TrainConfig};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PDCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Denoiser,
    Regressor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: CheckpointKind,
    pub train_config: TrainConfig,
    /// Serialized network shape (`NetShape` or `RegressorShape`).
    pub net: serde_json::Value,
    /// Number of optimizer steps taken so far.
    pub step: usize,
    pub param_count: usize,
    pub optimizer_state: bool,
    #[serde(default)]
    pub extensions: serde_json::Map<String, serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<f64>,
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = self.header.clone();
        header.param_count = self.params.len();
        header.optimizer_state = self.optimizer.is_some();
        let json = serde_json::to_vec(&header).map_err(|e| Error::data(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + self.params.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in &self.params {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        if let Some(opt) = &self.optimizer {
            for v in opt.m.iter().chain(&opt.v) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |msg: &str| Error::Parse {
            path: origin.to_path_buf(),
            line: 0,
            message: msg.to_string(),
        };
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(body).map_err(|e| bad(&format!("header: {e}")))?;
        let mut off = 16 + hlen;
        let n = header.param_count;
        let blob = bytes
            .get(off..off + 4 * n)
            .ok_or_else(|| bad("truncated parameter blob"))?;
        let params = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        off += 4 * n;
        let optimizer = if header.optimizer_state {
            let blob = bytes
                .get(off..off + 16 * n)
                .ok_or_else(|| bad("truncated optimizer state"))?;
            let vals: Vec<f64> = blob
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            off += 16 * n;
            Some(AdamState {
                m: vals[..n].to_vec(),
                v: vals[n..].to_vec(),
            })
        } else {
            None
        };
        if off != bytes.len() {
            return Err(bad("trailing bytes after checkpoint payload"));
        }
        Ok(Checkpoint {
            header,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }

    /// Deserializes an extension entry.
    pub fn extension<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .header
            .extensions
            .get(key)
            .ok_or_else(|| Error::data(format!("checkpoint lacks '{key}'")))?;
        serde_json::from_value(v.clone()).map_err(|e| Error::data(format!("{key}: {e}")))
    }

    pub fn set_extension<T: Serialize>(&mut self, key: &str, value: &T) -> Result<()> {
        let v = serde_json::to_value(value).map_err(|e| Error::data(e.to_string()))?;
        self.header.extensions.insert(key.to_string(), v);
        Ok(())
    }
}
