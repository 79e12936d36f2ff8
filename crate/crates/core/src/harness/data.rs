//! Dataset loaders: IDX image/label pairs, CIFAR binary batches and seeded
//! Gaussian blobs. Pixels are scaled to [0, 1].

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::layers::Batch;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Per-sample input shape.
    pub shape: Vec<usize>,
    pub classes: usize,
    /// Sample-major inputs.
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(shape: Vec<usize>, classes: usize, inputs: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        let dim: usize = shape.iter().product();
        if inputs.len() != dim * labels.len() {
            return Err(Error::shape("dataset", format!("{} labels of dim {dim} but {} inputs", labels.len(), inputs.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!("label {bad} with {classes} classes")));
        }
        Ok(Dataset {
            shape,
            classes,
            inputs,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.inputs[i * d..(i + 1) * d]
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let batch = self.batch(indices);
        Dataset {
            shape: self.shape.clone(),
            classes: self.classes,
            inputs: batch.inputs,
            labels: batch.labels,
        }
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        Batch {
            inputs: indices.iter().flat_map(|&i| self.sample(i).iter().copied()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Keeps the first `n` samples (all when `n` is 0).
    pub fn limit(&self, n: usize) -> Dataset {
        if n == 0 || n >= self.len() {
            return self.clone();
        }
        self.subset(&(0..n).collect::<Vec<_>>())
    }

    /// Seeded shuffle, then the first `round(fraction n)` samples become
    /// the validation set.
    pub fn split(&self, fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_val = (fraction * self.len() as f64).round() as usize;
        let (val, train) = idx.split_at(n_val);
        (self.subset(train), self.subset(val))
    }

    /// SHA-256 over shape, labels and the raw bits of every input value.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for &d in &self.shape {
            h.update((d as u64).to_le_bytes());
        }
        h.update((self.classes as u64).to_le_bytes());
        for &l in &self.labels {
            h.update((l as u64).to_le_bytes());
        }
        for &v in &self.inputs {
            h.update(v.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(what, offset, "truncated header"))
}

/// Parses an IDX image file into `(rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0, "idx images")?;
    if magic != IDX_IMAGES {
        return Err(Error::format("idx images", 0, format!("magic {magic:#010x}, expected {IDX_IMAGES:#010x}")));
    }
    let count = be_u32(bytes, 4, "idx images")? as usize;
    let rows = be_u32(bytes, 8, "idx images")? as usize;
    let cols = be_u32(bytes, 12, "idx images")? as usize;
    let need = count * rows * cols;
    let body = &bytes[16..];
    if body.len() != need {
        return Err(Error::format(
            "idx images",
            16 + body.len().min(need),
            format!("expected {need} pixel bytes, found {}", body.len()),
        ));
    }
    Ok((rows, cols, body.to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, "idx labels")?;
    if magic != IDX_LABELS {
        return Err(Error::format("idx labels", 0, format!("magic {magic:#010x}, expected {IDX_LABELS:#010x}")));
    }
    let count = be_u32(bytes, 4, "idx labels")? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(Error::format(
            "idx labels",
            8 + body.len().min(count),
            format!("expected {count} label bytes, found {}", body.len()),
        ));
    }
    Ok(body.to_vec())
}

/// Builds a dataset from in-memory IDX images and labels; the class count
/// is one more than the largest label.
pub fn idx_dataset(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let (rows, cols, pixels) = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    let dim = rows * cols;
    let count = if dim == 0 { 0 } else { pixels.len() / dim };
    if count != labels.len() {
        return Err(Error::format("idx labels", 4, format!("{} labels for {count} images", labels.len())));
    }
    let classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    Dataset::new(
        vec![1, rows, cols],
        classes,
        pixels.iter().map(|&p| f64::from(p) / 255.0).collect(),
        labels.iter().map(|&l| l as usize).collect(),
    )
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    idx_dataset(&std::fs::read(images)?, &std::fs::read(labels)?)
}

/// CIFAR binary records: one label byte then 3072 channel-major pixels.
pub fn cifar_dataset(bytes: &[u8], classes: usize) -> Result<Dataset> {
    if bytes.len() % CIFAR_RECORD != 0 {
        let offset = bytes.len() - bytes.len() % CIFAR_RECORD;
        return Err(Error::format("cifar", offset, "trailing partial record"));
    }
    let mut inputs = Vec::with_capacity(bytes.len() / CIFAR_RECORD * 3072);
    let mut labels = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    for (i, rec) in bytes.chunks(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= classes {
            return Err(Error::format("cifar", i * CIFAR_RECORD, format!("label {label} with {classes} classes")));
        }
        labels.push(label);
        inputs.extend(rec[1..].iter().map(|&p| f64::from(p) / 255.0));
    }
    Dataset::new(vec![3, 32, 32], classes, inputs, labels)
}

pub fn load_cifar(files: &[impl AsRef<Path>], classes: usize) -> Result<Dataset> {
    let mut bytes = Vec::new();
    for f in files {
        bytes.extend(std::fs::read(f)?);
    }
    cifar_dataset(&bytes, classes)
}

/// Gaussian blobs with covariance `spread^2 I`. Class `c` is centred at
/// `3 e_(c mod dim)`, negated when `c / dim` is odd. Labels cycle through
/// the classes and samples are then shuffled by `seed`.
pub fn synthetic_blobs(n: usize, dim: usize, classes: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if dim == 0 || classes == 0 || classes > 2 * dim {
        return Err(Error::Config(format!("synthetic blobs need 0 < classes <= 2 dim, got {classes} classes in {dim} dims")));
    }
    let normal = Normal::new(0.0, spread).map_err(|e| Error::Config(format!("bad data.spread: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut inputs = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for &i in &order {
        let c = i % classes;
        let sign = if (c / dim) % 2 == 0 { 3.0 } else { -3.0 };
        for j in 0..dim {
            let mean = if j == c % dim { sign } else { 0.0 };
            inputs.push(mean + normal.sample(&mut rng));
        }
        labels.push(c);
    }
    Dataset::new(vec![dim], classes, inputs, labels)
}
