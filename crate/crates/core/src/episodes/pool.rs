use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

/// One line of `index.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolEntry {
    /// Path relative to the pool directory.
    pub file: String,
    pub label: usize,
    pub shape: Vec<usize>,
    pub dtype: DType,
}

/// Labelled samples of identical shape, grouped by class. Class indices are
/// the sorted distinct labels.
#[derive(Debug, Clone)]
pub struct Pool<T: Scalar> {
    samples: Vec<Tensor<T>>,
    labels: Vec<usize>,
    class_labels: Vec<usize>,
    members: Vec<Vec<usize>>,
}

impl<T: Scalar> Pool<T> {
    pub fn new(samples: Vec<Tensor<T>>, labels: Vec<usize>) -> Result<Self> {
        if samples.len() != labels.len() || samples.is_empty() {
            return Err(Error::Data(format!(
                "pool needs one label per sample, got {} samples and {} labels",
                samples.len(),
                labels.len()
            )));
        }
        let shape = samples[0].shape();
        if let Some(i) = samples.iter().position(|s| s.shape() != shape) {
            return Err(Error::Data(format!("sample {i} has shape {:?}, expected {shape:?}", samples[i].shape())));
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &y) in labels.iter().enumerate() {
            groups.entry(y).or_default().push(i);
        }
        let (class_labels, members) = groups.into_iter().unzip();
        Ok(Self { samples, labels, class_labels, members })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.members.len()
    }

    pub fn sample_shape(&self) -> &[usize] {
        self.samples[0].shape()
    }

    pub fn sample(&self, id: usize) -> &Tensor<T> {
        &self.samples[id]
    }

    pub fn label(&self, id: usize) -> usize {
        self.labels[id]
    }

    /// Original label of class index `c`.
    pub fn class_label(&self, c: usize) -> usize {
        self.class_labels[c]
    }

    /// Sample ids of class index `c`, ascending.
    pub fn class_members(&self, c: usize) -> &[usize] {
        &self.members[c]
    }

    /// Stacks the given samples into `[ids.len(), ...sample_shape]`.
    pub fn gather(&self, ids: &[usize]) -> Result<Tensor<T>> {
        let mut shape = vec![ids.len()];
        shape.extend_from_slice(self.sample_shape());
        let mut data = Vec::with_capacity(ids.len() * self.samples[0].numel());
        for &id in ids {
            let s = self.samples.get(id).ok_or_else(|| Error::Data(format!("no sample {id} in pool")))?;
            data.extend_from_slice(s.data());
        }
        Tensor::new(shape, data)
    }
}

/// Reads `dir/index.json` and the raw little-endian sample files it lists.
pub fn load_pool<T: Scalar>(dir: &Path) -> Result<Pool<T>> {
    let index_path = dir.join("index.json");
    let text = fs::read_to_string(&index_path).map_err(|e| Error::io_at(&index_path, e))?;
    let entries: Vec<PoolEntry> =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", index_path.display())))?;
    let mut samples = Vec::with_capacity(entries.len());
    let mut labels = Vec::with_capacity(entries.len());
    for entry in &entries {
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io_at(&path, e))?;
        let numel: usize = entry.shape.iter().product();
        let width = entry.dtype.size();
        if bytes.len() != numel * width {
            return Err(Error::Data(format!(
                "{}: {} bytes, shape {:?} as {} needs {}",
                path.display(),
                bytes.len(),
                entry.shape,
                entry.dtype.name(),
                numel * width
            )));
        }
        let values: Vec<f64> = match entry.dtype {
            DType::F32 => {
                bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64).collect()
            }
            DType::F64 => bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect(),
        };
        samples.push(Tensor::from_f64(entry.shape.clone(), &values)?);
        labels.push(entry.label);
    }
    Pool::new(samples, labels)
}

/// Writes samples as `sample_{i}.bin` plus `index.json` into `dir`.
pub fn write_pool<T: Scalar>(dir: &Path, samples: &[Tensor<T>], labels: &[usize]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io_at(dir, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, (s, &label)) in samples.iter().zip(labels).enumerate() {
        let file = format!("sample_{i}.bin");
        let mut bytes = Vec::with_capacity(s.numel() * T::DTYPE.size());
        for &v in s.data() {
            v.write_le(&mut bytes);
        }
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io_at(&path, e))?;
        entries.push(PoolEntry { file, label, shape: s.shape().to_vec(), dtype: T::DTYPE });
    }
    let index = serde_json::to_string_pretty(&entries)?;
    let path = dir.join("index.json");
    fs::write(&path, index).map_err(|e| Error::io_at(&path, e))
}
