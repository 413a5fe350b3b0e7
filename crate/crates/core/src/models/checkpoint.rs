//! Versioned checkpoint container.
//!
//! Layout: 8-byte magic `ICHNETCK`, `u32` LE format version, `u32` LE header
//! length, UTF-8 JSON header (model configs, tensor index, metadata), then
//! every tensor as little-endian `f32` in index order.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ClsModelConfig, SegModelConfig, UNet, WaveletCnn};
use crate::error::{Error, Result};
use crate::nn::{hex, Parameterized};

pub const MAGIC: &[u8; 8] = b"ICHNETCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    seg_config: SegModelConfig,
    cls_config: Option<ClsModelConfig>,
    tensors: Vec<TensorEntry>,
    meta: BTreeMap<String, String>,
}

/// A frozen-or-trainable segmenter, optionally with the classifier trained
/// on top of it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub seg: UNet<f32>,
    pub cls: Option<WaveletCnn<f32>>,
    pub meta: BTreeMap<String, String>,
}

fn named_tensors(ck: &Checkpoint) -> Vec<(String, &ArrayD<f32>)> {
    let mut v: Vec<_> = ck
        .seg
        .params()
        .into_iter()
        .map(|(n, p)| (format!("seg.{n}"), &p.value))
        .collect();
    if let Some(cls) = &ck.cls {
        v.extend(
            cls.params()
                .into_iter()
                .map(|(n, p)| (format!("cls.{n}"), &p.value)),
        );
    }
    v
}

impl Checkpoint {
    pub fn segmentation(seg: UNet<f32>) -> Self {
        Self {
            seg,
            cls: None,
            meta: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let tensors = named_tensors(self);
        let header = Header {
            seg_config: self.seg.config().clone(),
            cls_config: self.cls.as_ref().map(|c| c.config().clone()),
            tensors: tensors
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in tensors {
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not an ichnet checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let header_bytes = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(header_bytes)
            .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let seg = UNet::new(&header.seg_config, &mut rng)?;
        let cls = match &header.cls_config {
            Some(c) => Some(WaveletCnn::new(c, &mut rng)?),
            None => None,
        };
        let mut ck = Checkpoint {
            seg,
            cls,
            meta: header.meta,
        };

        let mut stored: BTreeMap<&str, ArrayD<f32>> = BTreeMap::new();
        let mut offset = 16 + hlen;
        for entry in &header.tensors {
            let n: usize = entry.shape.iter().product();
            let raw = bytes
                .get(offset..offset + 4 * n)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {} is truncated", entry.name)))?;
            offset += 4 * n;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let arr = ArrayD::from_shape_vec(IxDyn(&entry.shape), values).expect("sized");
            if stored.insert(&entry.name, arr).is_some() {
                return Err(Error::Checkpoint(format!(
                    "duplicate tensor {}",
                    entry.name
                )));
            }
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes after the last tensor"));
        }

        let mut targets: Vec<(String, &mut ArrayD<f32>)> = ck
            .seg
            .params_mut()
            .into_iter()
            .map(|(n, p)| (format!("seg.{n}"), &mut p.value))
            .collect();
        if let Some(cls) = ck.cls.as_mut() {
            targets.extend(
                cls.params_mut()
                    .into_iter()
                    .map(|(n, p)| (format!("cls.{n}"), &mut p.value)),
            );
        }
        if targets.len() != stored.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors but its config needs {}",
                stored.len(),
                targets.len()
            )));
        }
        for (name, dst) in targets {
            let src = stored
                .remove(name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if src.shape() != dst.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, config expects {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            *dst = src;
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of the serialized bytes, hex encoded.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_bytes()))
    }
}
