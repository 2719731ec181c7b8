//! Binary checkpoint container.
//!
//! Layout: the magic bytes `DPCK1`, a UTF-8 JSON manifest terminated by a
//! NUL byte, then every tensor listed in the manifest as little-endian `f32`
//! values, concatenated in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::{Graph, Scalar, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"DPCK1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Architecture descriptor of the stored model.
    pub architecture: serde_json::Value,
    /// Preprocessing constants the model was trained with.
    pub preprocess: serde_json::Value,
    /// Pose-prior dimensionality; 0 for direct regression.
    pub prior_dim: usize,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: Vec<Tensor<f32>>,
}

impl Checkpoint {
    pub fn new(
        architecture: serde_json::Value,
        preprocess: serde_json::Value,
        prior_dim: usize,
        named: Vec<(String, Tensor<f32>)>,
    ) -> Self {
        let mut tensors = Vec::with_capacity(named.len());
        let mut entries = Vec::with_capacity(named.len());
        for (name, t) in named {
            entries.push(TensorEntry {
                name,
                shape: t.shape().to_vec(),
            });
            tensors.push(t);
        }
        Checkpoint {
            manifest: Manifest {
                architecture,
                preprocess,
                prior_dim,
                tensors: entries,
            },
            tensors,
        }
    }

    /// All graph parameters in registry order, followed by `extra` tensors.
    pub fn from_graph<T: Scalar>(
        graph: &Graph<T>,
        architecture: serde_json::Value,
        preprocess: serde_json::Value,
        prior_dim: usize,
        extra: Vec<(String, Tensor<f32>)>,
    ) -> Self {
        let mut named: Vec<(String, Tensor<f32>)> =
            graph.params().iter().map(|p| (p.name.clone(), p.value.cast())).collect();
        named.extend(extra);
        Self::new(architecture, preprocess, prior_dim, named)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.manifest
            .tensors
            .iter()
            .position(|e| e.name == name)
            .map(|i| &self.tensors[i])
    }

    /// Copies stored values into every same-named graph parameter. Fails if
    /// a parameter is missing or has a different shape.
    pub fn load_into<T: Scalar>(&self, graph: &mut Graph<T>) -> Result<()> {
        for p in graph.params_mut() {
            let t = self
                .tensor(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{}`", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has shape {:?}, graph expects {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.cast();
            p.velocity.fill(T::zero());
            p.grad.fill(T::zero());
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_vec(&self.manifest)?;
        let payload: usize = self.tensors.iter().map(|t| t.len() * 4).sum();
        let mut out = Vec::with_capacity(CHECKPOINT_MAGIC.len() + json.len() + 1 + payload);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&json);
        out.push(0);
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let rest = bytes
            .strip_prefix(CHECKPOINT_MAGIC.as_slice())
            .ok_or_else(|| Error::Checkpoint("bad magic".into()))?;
        let nul = rest
            .iter()
            .position(|&b| b == 0)
            .ok_or_else(|| Error::Checkpoint("unterminated manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(&rest[..nul])?;
        let mut blob = &rest[nul + 1..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            let len: usize = e.shape.iter().product();
            if blob.len() < len * 4 {
                return Err(Error::Checkpoint(format!("truncated data for `{}`", e.name)));
            }
            let (head, tail) = blob.split_at(len * 4);
            let data = head
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(Tensor::new(&e.shape, data)?);
            blob = tail;
        }
        if !blob.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", blob.len())));
        }
        Ok(Checkpoint { manifest, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
