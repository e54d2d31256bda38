//! MNIST in IDX format: loading, splitting and mini-batching.
//!
//! IDX files are big-endian: a `u32` magic (2051 for rank-3 images, 2049 for
//! rank-1 labels), one `u32` per dimension, then raw `u8` payload. Gzip
//! compressed files are detected by their header and inflated transparently.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
pub const NUM_CLASSES: usize = 10;

/// Images kept as raw bytes; tensors are produced per batch, scaled to [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pixels: Vec<u8>,
    labels: Vec<u8>,
    rows: usize,
    cols: usize,
}

impl Dataset {
    pub fn new(pixels: Vec<u8>, labels: Vec<u8>, rows: usize, cols: usize) -> Result<Self> {
        let per = rows * cols;
        if per == 0 || pixels.len() != labels.len() * per {
            return Err(Error::Consistency(format!(
                "{} pixel bytes do not hold {} images of {rows}x{cols}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::Consistency(format!(
                "label {bad} outside [0, {NUM_CLASSES})"
            )));
        }
        Ok(Self {
            pixels,
            labels,
            rows,
            cols,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    /// `[indices.len(), rows, cols, 1]`, pixel bytes divided by 255.
    pub fn images<T: Scalar>(&self, indices: &[usize]) -> Tensor<T> {
        let per = self.rows * self.cols;
        let scale = T::one() / T::of(255.0);
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend(self.pixels[i * per..(i + 1) * per].iter().map(|&b| T::of(b as f64) * scale));
        }
        Tensor::new(&[indices.len(), self.rows, self.cols, 1], data).expect("sized by construction")
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Length {
            path: path.to_path_buf(),
            expected: at + 4,
            found: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], want: u32, path: &Path) -> Result<()> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != want {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("expected magic {want:#010x} ({want}), found {magic:#010x} ({magic})"),
        });
    }
    Ok(())
}

fn payload<'a>(bytes: &'a [u8], header: usize, len: usize, path: &Path) -> Result<&'a [u8]> {
    let expected = header + len;
    if bytes.len() < expected {
        return Err(Error::Length {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    Ok(&bytes[header..expected])
}

/// Returns `(count, rows, cols, pixels)`.
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = read_file(path)?;
    check_magic(&bytes, IMAGES_MAGIC, path)?;
    let n = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let data = payload(&bytes, 16, n * rows * cols, path)?;
    Ok((n, rows, cols, data.to_vec()))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read_file(path)?;
    check_magic(&bytes, LABELS_MAGIC, path)?;
    let n = be_u32(&bytes, 4, path)? as usize;
    Ok(payload(&bytes, 8, n, path)?.to_vec())
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (n, rows, cols, pixels) = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    if labels.len() != n {
        return Err(Error::Consistency(format!(
            "{} holds {n} images but {} holds {} labels",
            images_path.display(),
            labels_path.display(),
            labels.len()
        )));
    }
    Dataset::new(pixels, labels, rows, cols)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn write_idx_images(path: &Path, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    let per = rows * cols;
    if per == 0 || !pixels.len().is_multiple_of(per) {
        return Err(Error::Consistency(format!(
            "{} bytes are not whole {rows}x{cols} images",
            pixels.len()
        )));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, (pixels.len() / per) as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    write_file(path, &out)
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    write_file(path, &out)
}

/// Finds `<stem>` or `<stem>.gz` inside `dir`.
fn locate(dir: &Path, stem: &str) -> Result<PathBuf> {
    let plain = dir.join(stem);
    if plain.is_file() {
        return Ok(plain);
    }
    let gz = dir.join(format!("{stem}.gz"));
    if gz.is_file() {
        return Ok(gz);
    }
    Err(Error::io(
        plain,
        std::io::Error::new(std::io::ErrorKind::NotFound, "MNIST file not found (also tried .gz)"),
    ))
}

/// Loads `(train, test)` from the standard file names in `dir`.
pub fn load_mnist_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_idx(
        &locate(dir, "train-images-idx3-ubyte")?,
        &locate(dir, "train-labels-idx1-ubyte")?,
    )?;
    let test = load_idx(
        &locate(dir, "t10k-images-idx3-ubyte")?,
        &locate(dir, "t10k-labels-idx1-ubyte")?,
    )?;
    Ok((train, test))
}

/// A view of selected samples of a dataset.
#[derive(Debug, Clone)]
pub struct Subset<'a> {
    data: &'a Dataset,
    indices: Vec<usize>,
}

/// One mini-batch.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub x: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<'a> Subset<'a> {
    pub fn new(data: &'a Dataset, indices: Vec<usize>) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= data.len()) {
            return Err(Error::Argument(format!(
                "index {bad} out of range for {} samples",
                data.len()
            )));
        }
        Ok(Self { data, indices })
    }

    pub fn all(data: &'a Dataset) -> Self {
        Self {
            data,
            indices: data.all_indices(),
        }
    }

    pub fn dataset(&self) -> &'a Dataset {
        self.data
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Keeps at most the first `n` samples.
    pub fn truncate(&mut self, n: usize) {
        self.indices.truncate(n);
    }

    pub fn batch<T: Scalar>(&self, positions: &[usize]) -> Batch<T> {
        let idx: Vec<usize> = positions.iter().map(|&p| self.indices[p]).collect();
        Batch {
            x: self.data.images(&idx),
            labels: idx.iter().map(|&i| self.data.label(i)).collect(),
        }
    }

    /// Shuffled mini-batches for one epoch. The permutation is seeded with
    /// `seed ^ epoch`; the last batch may be short.
    pub fn batches<T: Scalar>(&self, batch_size: usize, seed: u64, epoch: u64) -> Batches<'_, 'a, T> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ epoch));
        Batches::new(self, order, batch_size)
    }

    /// Mini-batches in stored order (for evaluation).
    pub fn sequential<T: Scalar>(&self, batch_size: usize) -> Batches<'_, 'a, T> {
        Batches::new(self, (0..self.len()).collect(), batch_size)
    }
}

pub struct Batches<'s, 'a, T> {
    subset: &'s Subset<'a>,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
    _elem: std::marker::PhantomData<T>,
}

impl<'s, 'a, T> Batches<'s, 'a, T> {
    fn new(subset: &'s Subset<'a>, order: Vec<usize>, batch_size: usize) -> Self {
        Self {
            subset,
            order,
            batch_size: batch_size.max(1),
            pos: 0,
            _elem: std::marker::PhantomData,
        }
    }

    /// Subset positions in emission order.
    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

impl<T: Scalar> Iterator for Batches<'_, '_, T> {
    type Item = Batch<T>;

    fn next(&mut self) -> Option<Batch<T>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.subset.batch(&self.order[self.pos..end]);
        self.pos = end;
        Some(batch)
    }
}

/// Seeded shuffle of `dataset`, holding out the last `dev_fraction` as the
/// development split. Returns `(train, dev)`.
pub fn split(dataset: &Dataset, dev_fraction: f64, seed: u64) -> Result<(Subset<'_>, Subset<'_>)> {
    if !(0.0..1.0).contains(&dev_fraction) {
        return Err(Error::Argument(format!(
            "dev fraction must lie in [0, 1), got {dev_fraction}"
        )));
    }
    let mut order = dataset.all_indices();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let dev_len = (dataset.len() as f64 * dev_fraction).round() as usize;
    let dev = order.split_off(dataset.len() - dev_len);
    Ok((
        Subset {
            data: dataset,
            indices: order,
        },
        Subset {
            data: dataset,
            indices: dev,
        },
    ))
}
