//! Checkpoint containers and the in-memory [`TensorMap`].
//!
//! Every tensor is held as a dense `f32` buffer regardless of how it was
//! stored on disk; BF16 exists only at the read/write boundary. Names iterate
//! in lexicographic order so that manifests, fingerprints and output files are
//! identical from run to run.

mod container;
mod dtype;
mod policy;

use std::collections::BTreeMap;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

pub use container::{load_checkpoint, read_header, read_manifest, write_checkpoint, write_sharded, INDEX_FILE};
pub use dtype::{bf16_to_f32, f32_to_bf16, DType};
pub use policy::{DtypeChoice, DtypePolicy, DtypeRule};

use crate::error::{Error, Result};

/// Header entry of one tensor inside a container file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorMeta {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// `(start, end)` offsets into the payload that follows the header.
    pub byte_range: (usize, usize),
}

impl TensorMeta {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// A dense FP32 tensor that remembers the dtype it was loaded from.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    source_dtype: DType,
}

impl Tensor {
    /// Panics if `data.len()` disagrees with `shape`.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self::with_dtype(shape, data, DType::F32)
    }

    pub fn with_dtype(shape: Vec<usize>, data: Vec<f32>, source_dtype: DType) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, data.len(), "shape {shape:?} does not match buffer length");
        Self {
            shape,
            data,
            source_dtype,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    /// Same shape and source dtype, new values.
    pub fn like(&self, data: Vec<f32>) -> Self {
        Self::with_dtype(self.shape.clone(), data, self.source_dtype)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn source_dtype(&self) -> DType {
        self.source_dtype
    }

    pub fn set_source_dtype(&mut self, dtype: DType) {
        self.source_dtype = dtype;
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    /// `(rows, cols)` for 2-D tensors.
    pub fn matrix_dims(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Some((*r, *c)),
            _ => None,
        }
    }
}

/// Named collection of tensors: the in-memory form of a checkpoint.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorMap {
    tensors: BTreeMap<String, Tensor>,
    metadata: BTreeMap<String, String>,
}

impl TensorMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    /// Free-form string metadata carried in the container header.
    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn metadata_mut(&mut self) -> &mut BTreeMap<String, String> {
        &mut self.metadata
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Error unless `other` has exactly the same tensor names and shapes.
    pub fn check_same_manifest(&self, other: &TensorMap, other_label: &str) -> Result<()> {
        for (name, t) in &self.tensors {
            let o = other.get(name).ok_or_else(|| Error::MissingTensor {
                tensor: name.clone(),
                side: other_label.to_string(),
            })?;
            if o.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    tensor: name.clone(),
                    left: t.shape().to_vec(),
                    right: o.shape().to_vec(),
                });
            }
        }
        if let Some(extra) = other.names().find(|n| !self.contains(n)) {
            return Err(Error::MissingTensor {
                tensor: extra.clone(),
                side: "the reference checkpoint".into(),
            });
        }
        Ok(())
    }

    /// SHA-256 over the sorted `(name, shape)` list.
    pub fn manifest_fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((t.shape.len() as u64).to_le_bytes());
            for &d in &t.shape {
                h.update((d as u64).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// SHA-256 over names, shapes and FP32 value bits. Independent of the
    /// storage dtype and of the thread count used to compute it.
    pub fn content_fingerprint(&self) -> String {
        let per_tensor: Vec<[u8; 32]> = self
            .tensors
            .par_iter()
            .map(|(name, t)| {
                let mut h = Sha256::new();
                h.update((name.len() as u64).to_le_bytes());
                h.update(name.as_bytes());
                h.update((t.shape.len() as u64).to_le_bytes());
                for &d in &t.shape {
                    h.update((d as u64).to_le_bytes());
                }
                for chunk in t.data.chunks(16 * 1024) {
                    let bytes: Vec<u8> = chunk.iter().flat_map(|v| v.to_le_bytes()).collect();
                    h.update(&bytes);
                }
                h.finalize().into()
            })
            .collect();
        let mut h = Sha256::new();
        for d in per_tensor {
            h.update(d);
        }
        hex::encode(h.finalize())
    }

    /// Apply `f` to every tensor in parallel, preserving names and metadata.
    pub fn try_par_map<F>(&self, f: F) -> Result<TensorMap>
    where
        F: Fn(&str, &Tensor) -> Result<Tensor> + Sync,
    {
        let entries: Vec<(&String, &Tensor)> = self.tensors.iter().collect();
        let out: Vec<(String, Tensor)> = entries
            .into_par_iter()
            .map(|(name, t)| f(name, t).map(|r| (name.clone(), r)))
            .collect::<Result<_>>()?;
        Ok(TensorMap {
            tensors: out.into_iter().collect(),
            metadata: self.metadata.clone(),
        })
    }
}

impl FromIterator<(String, Tensor)> for TensorMap {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        TensorMap {
            tensors: iter.into_iter().collect(),
            metadata: BTreeMap::new(),
        }
    }
}

impl IntoIterator for TensorMap {
    type Item = (String, Tensor);
    type IntoIter = std::collections::btree_map::IntoIter<String, Tensor>;

    fn into_iter(self) -> Self::IntoIter {
        self.tensors.into_iter()
    }
}
