//! Binary checkpoints.
//!
//! ```text
//! "PFCK"  u32 version  u32 header_len  header (UTF-8 JSON)  tensor data
//! ```
//!
//! All integers and tensor values are little-endian; tensor values are `f32`,
//! row-major, in the order listed by the header.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams, TENSOR_NAMES};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PFCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    #[serde(default)]
    meta: BTreeMap<String, serde_json::Value>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    /// Additional named tensors (optimizer moments and the like).
    pub extra: Vec<(String, Array2<f64>)>,
    pub meta: BTreeMap<String, serde_json::Value>,
}

impl Checkpoint {
    pub fn new(params: ModelParams) -> Self {
        Self {
            params,
            extra: Vec::new(),
            meta: BTreeMap::new(),
        }
    }

    pub fn extra(&self, name: &str) -> Option<&Array2<f64>> {
        self.extra.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut all: Vec<(String, &Array2<f64>)> = self
            .params
            .tensors()
            .iter()
            .map(|(n, t)| (n.to_string(), *t))
            .collect();
        all.extend(self.extra.iter().map(|(n, t)| (n.clone(), t)));
        let header = Header {
            model: self.params.config,
            meta: self.meta.clone(),
            tensors: all
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    shape: [t.nrows(), t.ncols()],
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let payload: usize = all.iter().map(|(_, t)| t.len() * 4).sum();
        let mut out = Vec::with_capacity(12 + header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &all {
            for v in t.iter() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| Error::Checkpoint(e.to_string()))?;
        header
            .model
            .validate()
            .map_err(|e| Error::Checkpoint(e.to_string()))?;

        let mut params = ModelParams::zeros(header.model);
        let mut extra = Vec::new();
        let mut offset = 12 + hlen;
        let mut seen_model = 0;
        for entry in &header.tensors {
            let count = entry.shape[0] * entry.shape[1];
            let raw = bytes
                .get(offset..offset + 4 * count)
                .ok_or_else(|| bad("truncated tensor data"))?;
            offset += 4 * count;
            let values: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            let tensor = Array2::from_shape_vec((entry.shape[0], entry.shape[1]), values)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            match params.tensors_mut().into_iter().find(|(n, _)| *n == entry.name) {
                Some((_, slot)) => {
                    if slot.dim() != tensor.dim() {
                        return Err(Error::Checkpoint(format!(
                            "tensor `{}` has shape {:?}, model expects {:?}",
                            entry.name,
                            tensor.dim(),
                            slot.dim()
                        )));
                    }
                    *slot = tensor;
                    seen_model += 1;
                }
                None => extra.push((entry.name.clone(), tensor)),
            }
        }
        if seen_model != TENSOR_NAMES.len() {
            return Err(bad("checkpoint is missing model tensors"));
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Self {
            params,
            extra,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> ModelParams {
        let cfg = ModelConfig {
            point_hidden: 4,
            point_dim: 3,
            dim: 6,
            seg_classes: 2,
            vocab_size: 7,
            embed_dim: 5,
        };
        ModelParams::init(cfg, 8).unwrap()
    }

    #[test]
    fn round_trip_rounds_to_f32() {
        let p = params();
        let mut ck = Checkpoint::new(p.clone());
        ck.extra.push(("adam.m.pt_w1".into(), p.pt_w1.clone()));
        ck.meta.insert("step".into(), serde_json::json!(12));
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.meta["step"], 12);
        for ((_, a), (_, b)) in back.params.tensors().iter().zip(p.tensors().iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
        assert!(back.extra("adam.m.pt_w1").is_some());
        // a second cycle is exact
        assert_eq!(Checkpoint::from_bytes(&back.to_bytes()).unwrap(), back);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = Checkpoint::new(params()).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(Checkpoint::from_bytes(&wrong).is_err());
        let mut version = bytes.clone();
        version[4] = 9;
        assert!(Checkpoint::from_bytes(&version).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
