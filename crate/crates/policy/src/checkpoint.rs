//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "TVRPCKPT"
//! version      u32
//! header_len   u32
//! header       header_len bytes of UTF-8 JSON (see `Header`)
//! data         f64 values of every tensor in header order, row-major
//! ```
//!
//! The header records the architecture, the derived widths and the name and
//! shape of every tensor. Loading rebuilds the architecture from the
//! recorded configuration and refuses any mismatch.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tvrp_autodiff::{Mat, ParamStore};

use crate::config::PolicyConfig;
use crate::model::{check_layout, Policy};
use crate::PolicyError;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TVRPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: PolicyConfig,
    embed_dim: usize,
    encoder_layers: usize,
    heads: usize,
    num_trucks: usize,
    extended_dim: usize,
    context_dim: usize,
    tensors: Vec<TensorHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    rows: usize,
    cols: usize,
    trainable: bool,
}

impl Policy {
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = self.config();
        let header = Header {
            config: c.clone(),
            embed_dim: c.embed_dim,
            encoder_layers: c.encoder_layers,
            heads: c.heads,
            num_trucks: c.num_trucks,
            extended_dim: c.extended_dim(),
            context_dim: c.context_dim(),
            tensors: self
                .store()
                .entries()
                .iter()
                .map(|e| TensorHeader { name: e.name.clone(), rows: e.value.rows(), cols: e.value.cols(), trainable: e.trainable })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + 8 * self.store().entries().iter().map(|e| e.value.len()).sum::<usize>());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for e in self.store().entries() {
            for v in e.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PolicyError> {
        let bad = |m: &str| PolicyError::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a policy checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(PolicyError::Checkpoint(format!("unsupported version {version}, expected {CHECKPOINT_VERSION}")));
        }
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| PolicyError::Checkpoint(format!("header: {e}")))?;
        let mut policy = Policy::new(header.config.clone(), 0)?;
        let c = policy.config();
        if (header.embed_dim, header.encoder_layers, header.heads, header.num_trucks, header.extended_dim, header.context_dim)
            != (c.embed_dim, c.encoder_layers, c.heads, c.num_trucks, c.extended_dim(), c.context_dim())
        {
            return Err(bad("header dimensions disagree with its configuration"));
        }
        let mut data = &body[hlen..];
        let mut store = ParamStore::new();
        for th in &header.tensors {
            let count = th.rows * th.cols;
            if data.len() < 8 * count {
                return Err(bad("truncated tensor data"));
            }
            let values = data[..8 * count].chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
            data = &data[8 * count..];
            let m = Mat::new(th.rows, th.cols, values);
            if th.trainable {
                store.add(th.name.clone(), m);
            } else {
                store.add_buffer(th.name.clone(), m);
            }
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }
        check_layout(policy.store(), &store)?;
        policy.set_store(store)?;
        Ok(policy)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PolicyError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PolicyError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
