//! Datasets: MNIST IDX ingestion, a synthetic relevance benchmark, and
//! minibatch partitioning.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::rng::{sample_standard_normal, RngState};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
/// Standardization applied to `[0, 1]`-scaled MNIST pixels.
pub const MNIST_MEAN: f64 = 0.1307;
pub const MNIST_STD: f64 = 0.3081;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N × D]` or `[N × C × H × W]`.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::dim(format!(
                "{} input rows but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::contract(format!("label {bad} outside [0, {classes})")));
        }
        Ok(Self {
            inputs,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows at `idx` as a new dataset.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            inputs: self.inputs.select_rows(idx)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        })
    }

    /// The first `n` samples (or all of them).
    pub fn head(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Inputs reshaped to `[N × features]`.
    pub fn flattened(&self) -> Result<Self> {
        let n = self.inputs.rows();
        Ok(Self {
            inputs: self.inputs.reshape(&[n, self.inputs.row_len()])?,
            labels: self.labels.clone(),
            classes: self.classes,
        })
    }
}

fn format_err(path: &Path, offset: u64, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset,
        detail: detail.into(),
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| format_err(path, bytes.len() as u64, "truncated header"))
}

/// Raw IDX image file: `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(format_err(path, 0, format!("expected image magic 0x00000803, found {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    if n == 0 || rows == 0 || cols == 0 {
        return Err(format_err(path, 4, "zero dimension in image header"));
    }
    let need = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| format_err(path, 4, "image dimensions overflow"))?;
    let body = &bytes[16..];
    if body.len() != need {
        return Err(format_err(
            path,
            bytes.len() as u64,
            format!("expected {need} pixel bytes after header, found {}", body.len()),
        ));
    }
    Ok((n, rows, cols, body.to_vec()))
}

/// Raw IDX label file.
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(format_err(path, 0, format!("expected label magic 0x00000801, found {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(format_err(
            path,
            bytes.len() as u64,
            format!("expected {n} label bytes after header, found {}", body.len()),
        ));
    }
    Ok(body.to_vec())
}

pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let n = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Pixel byte → standardized input.
pub fn normalize_pixel(p: u8) -> f64 {
    (p as f64 / 255.0 - MNIST_MEAN) / MNIST_STD
}

/// Inverse of [`normalize_pixel`], on the `[0, 255]` scale.
pub fn denormalize_pixel(x: f64) -> f64 {
    (x * MNIST_STD + MNIST_MEAN) * 255.0
}

/// Builds a `[N × 1 × H × W]` dataset from raw IDX bytes.
pub fn dataset_from_idx(images: &[u8], labels: &[u8], images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_idx_images(images, images_path)?;
    let labs = parse_idx_labels(labels, labels_path)?;
    if labs.len() != n {
        return Err(format_err(
            labels_path,
            4,
            format!("{} labels for {n} images", labs.len()),
        ));
    }
    let classes = labs.iter().copied().max().unwrap_or(0) as usize + 1;
    let classes = classes.max(10);
    let data = pixels.iter().map(|&p| normalize_pixel(p)).collect();
    let inputs = Tensor::new(vec![n, 1, rows, cols], data)?;
    Dataset::new(inputs, labs.into_iter().map(usize::from).collect(), classes)
}

/// Loads an IDX image/label pair.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = fs::read(images_path)?;
    let labels = fs::read(labels_path)?;
    dataset_from_idx(&images, &labels, images_path, labels_path)
}

/// Two-class data whose label depends only on the first `d_signal` features.
///
/// Every feature is N(0, 1). The label is `1[v·x_signal > 0]` for a random
/// direction `v` fixed by the seed; the trailing `d_noise` columns are
/// drawn independently of everything else.
pub fn synthetic_relevance(n: usize, d_signal: usize, d_noise: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || d_signal == 0 {
        return Err(Error::contract("synthetic_relevance needs n, d_signal >= 1"));
    }
    let root = RngState::new(seed).split(0x5e1);
    let mut g = root.split(0).next_generator();
    let direction: Vec<f64> = (0..d_signal).map(|_| g.gen_range(0.5..1.5) * if g.gen() { 1.0 } else { -1.0 }).collect();
    let signal = sample_standard_normal(&mut root.split(1), &[n, d_signal]);
    let noise = (d_noise > 0).then(|| sample_standard_normal(&mut root.split(2), &[n, d_noise]));
    let d = d_signal + d_noise;
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let row = &signal.data()[i * d_signal..(i + 1) * d_signal];
        let score: f64 = row.iter().zip(&direction).map(|(x, v)| x * v).sum();
        labels.push(usize::from(score > 0.0));
        data.extend_from_slice(row);
        if let Some(nz) = &noise {
            data.extend_from_slice(&nz.data()[i * d_noise..(i + 1) * d_noise]);
        }
    }
    Dataset::new(Tensor::new(vec![n, d], data)?, labels, 2)
}

/// A random permutation of `0..n` cut into consecutive batches; the last may be short.
pub fn minibatches(n: usize, batch_size: usize, rng: &mut RngState) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::contract("batch size must be >= 1"));
    }
    Ok(rng
        .permutation(n)
        .chunks(batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> (Vec<u8>, Vec<u8>) {
        let pixels: Vec<u8> = (0..3 * 4 * 5).map(|i| (i * 37 % 256) as u8).collect();
        (encode_idx_images(4, 5, &pixels), encode_idx_labels(&[3, 0, 9]))
    }

    #[test]
    fn fixture_parses() {
        let (img, lab) = fixture();
        let ds = dataset_from_idx(&img, &lab, Path::new("i"), Path::new("l")).unwrap();
        assert_eq!(ds.inputs.shape(), &[3, 1, 4, 5]);
        assert_eq!(ds.labels, vec![3, 0, 9]);
        assert_eq!(ds.classes, 10);
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = fixture();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        fs::write(&ip, &img).unwrap();
        fs::write(&lp, &lab).unwrap();
        let (n, r, c, pixels) = parse_idx_images(&fs::read(&ip).unwrap(), &ip).unwrap();
        assert_eq!(encode_idx_images(r, c, &pixels), img);
        assert_eq!(n, 3);
        assert_eq!(encode_idx_labels(&parse_idx_labels(&fs::read(&lp).unwrap(), &lp).unwrap()), lab);
        let ds = load_idx(&ip, &lp).unwrap();
        let back: Vec<u8> = ds.inputs.data().iter().map(|&x| denormalize_pixel(x).round() as u8).collect();
        assert_eq!(back, pixels);
    }

    #[test]
    fn wrong_magic_rejected() {
        let (img, _) = fixture();
        let err = parse_idx_labels(&img, Path::new("l")).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }));
    }

    #[test]
    fn count_mismatch_rejected() {
        let (img, _) = fixture();
        let lab = encode_idx_labels(&[1, 2]);
        assert!(dataset_from_idx(&img, &lab, Path::new("i"), Path::new("l")).is_err());
    }

    #[test]
    fn normalization_inverts() {
        for p in 0..=255u8 {
            assert!((denormalize_pixel(normalize_pixel(p)) - p as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn minibatch_partition() {
        let mut rng = RngState::new(0);
        let b = minibatches(10, 3, &mut rng).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 3, 1]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(minibatches(10, 3, &mut RngState::new(0)).unwrap(), b);
        assert!(minibatches(10, 0, &mut rng).is_err());
    }

    #[test]
    fn synthetic_is_seeded_and_shaped() {
        let a = synthetic_relevance(50, 3, 2, 1).unwrap();
        assert_eq!(a.inputs.shape(), &[50, 5]);
        assert_eq!(a, synthetic_relevance(50, 3, 2, 1).unwrap());
        assert_ne!(a, synthetic_relevance(50, 3, 2, 2).unwrap());
        assert!(synthetic_relevance(0, 3, 2, 1).is_err());
        // signal columns do not depend on how many noise columns are requested
        let b = synthetic_relevance(50, 3, 0, 1).unwrap();
        assert_eq!(a.labels, b.labels);
    }
}
