//! Parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"CHTCKPT1"            8-byte magic
//! u32                    header length in bytes
//! header                 UTF-8 JSON: {"spec": UNetSpec, "tensors": [{"name", "shape"}, ...]}
//! f32 × Σ numel          tensor payloads, in header order, row-major
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use super::unet::{Params, UNetSpec};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CHTCKPT1";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    spec: UNetSpec,
    tensors: Vec<TensorEntry>,
}

/// Network spec plus trained parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: UNetSpec,
    pub params: Params,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            spec: self.spec.clone(),
            tensors: self
                .params
                .entries()
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(12 + json.len() + 4 * self.params.num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.params.entries() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: &str| Error::Decode {
            entry: "checkpoint".into(),
            reason: reason.into(),
        };
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let mut pos = 12 + hlen;
        let mut entries = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let raw = bytes
                .get(pos..pos + 4 * n)
                .ok_or_else(|| bad(&format!("truncated payload for `{}`", e.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            pos += 4 * n;
            entries.push((e.name, Tensor::new(e.shape, data)?));
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        let ck = Checkpoint {
            spec: header.spec,
            params: Params::new(entries),
        };
        ck.params.check_against(&ck.spec)?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}
