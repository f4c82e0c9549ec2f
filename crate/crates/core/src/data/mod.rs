//! Datasets: CIFAR binaries, a synthetic generator, augmentation and batching.
//!
//! Images are stored as raw bytes (`[N, 3, 32, 32]`, channel planes) and
//! converted to normalized tensors per batch.

mod augment;
pub(crate) mod batch;
pub mod cifar;
mod synth;

pub use augment::{augment, hflip_in_place, AugmentPolicy};
pub use batch::{batch_iter, epoch_permutation, BatchIter};
pub use cifar::{load_cifar, write_cifar, CifarVariant};
pub use synth::{synth_dataset, SynthSpec};

use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use thiserror::Error;

use crate::tensor::{Scalar, Tensor};

pub const CHANNELS: usize = 3;
pub const SIDE: usize = 32;
pub const IMAGE_BYTES: usize = CHANNELS * SIDE * SIDE;

/// Environment variable naming the directory that holds downloaded datasets.
pub const DATA_ROOT_ENV: &str = "MHKD_DATA_ROOT";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: file not found")]
    Missing { path: PathBuf },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: expected {expected} records, found {found}")]
    RecordCount { path: PathBuf, expected: usize, found: usize },
    #[error("{path}: truncated record at byte offset {offset} ({len} bytes, record size {record})")]
    Truncated { path: PathBuf, offset: usize, len: usize, record: usize },
    #[error("{path}: label {label} out of range for {classes} classes at byte offset {offset}")]
    Label { path: PathBuf, offset: usize, label: usize, classes: usize },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Per-channel mean and standard deviation of pixel values scaled to [0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; CHANNELS],
    pub std: [f64; CHANNELS],
}

impl Normalization {
    pub fn identity() -> Self {
        Self { mean: [0.0; CHANNELS], std: [1.0; CHANNELS] }
    }

    /// Statistics of `pixels` (whole images, channel planes).
    pub fn from_pixels(pixels: &[u8]) -> Self {
        let plane = SIDE * SIDE;
        let mut sum = [0.0f64; CHANNELS];
        let mut sq = [0.0f64; CHANNELS];
        let mut count = 0usize;
        for img in pixels.chunks_exact(IMAGE_BYTES) {
            for c in 0..CHANNELS {
                for &p in &img[c * plane..(c + 1) * plane] {
                    let v = p as f64 / 255.0;
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
            count += plane;
        }
        let n = count.max(1) as f64;
        let mean = sum.map(|s| s / n);
        let mut std = [1.0; CHANNELS];
        for c in 0..CHANNELS {
            let var = (sq[c] / n - mean[c] * mean[c]).max(0.0);
            std[c] = if var > 1e-12 { var.sqrt() } else { 1.0 };
        }
        Self { mean, std }
    }
}

/// An in-memory image classification split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub num_classes: usize,
    pixels: Vec<u8>,
    labels: Vec<usize>,
    pub normalization: Normalization,
}

/// A batch of normalized images `[B, 3, 32, 32]` and class indices.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch<T: Scalar> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(split: Split, num_classes: usize, pixels: Vec<u8>, labels: Vec<usize>) -> Result<Self, DataError> {
        if labels.is_empty() || pixels.len() != labels.len() * IMAGE_BYTES {
            return Err(DataError::Invalid(format!("{} pixel bytes for {} labels", pixels.len(), labels.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(DataError::Invalid(format!("label {l} out of range for {num_classes} classes")));
        }
        Ok(Self { split, num_classes, pixels, labels, normalization: Normalization::identity() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn image_bytes(&self, i: usize) -> &[u8] {
        &self.pixels[i * IMAGE_BYTES..(i + 1) * IMAGE_BYTES]
    }

    pub fn with_normalization(mut self, norm: Normalization) -> Self {
        self.normalization = norm;
        self
    }

    /// The first `n` records (all of them if `n` exceeds the size).
    pub fn truncated(mut self, n: usize) -> Self {
        let n = n.min(self.len()).max(1);
        self.labels.truncate(n);
        self.pixels.truncate(n * IMAGE_BYTES);
        self
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        self.labels.iter().for_each(|&l| h[l] += 1);
        h
    }

    /// Normalized batch of the given records.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> LabeledBatch<T> {
        let plane = SIDE * SIDE;
        let mut data = Vec::with_capacity(indices.len() * IMAGE_BYTES);
        for &i in indices {
            let img = self.image_bytes(i);
            for c in 0..CHANNELS {
                let (m, s) = (self.normalization.mean[c], self.normalization.std[c]);
                data.extend(img[c * plane..(c + 1) * plane].iter().map(|&p| T::from_f64((p as f64 / 255.0 - m) / s)));
            }
        }
        LabeledBatch {
            images: Tensor::new(&[indices.len(), CHANNELS, SIDE, SIDE], data).expect("image shape"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Inverse of the normalization in [`Dataset::batch`], back to bytes.
    pub fn denormalize<T: Scalar>(&self, image: &[T]) -> Vec<u8> {
        let plane = SIDE * SIDE;
        image
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = (i / plane) % CHANNELS;
                let p = (v.to_f64() * self.normalization.std[c] + self.normalization.mean[c]) * 255.0;
                p.round().clamp(0.0, 255.0) as u8
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_round_trip() {
        let pixels: Vec<u8> = (0..2 * IMAGE_BYTES).map(|i| (i * 7 % 256) as u8).collect();
        let norm = Normalization::from_pixels(&pixels);
        let ds = Dataset::new(Split::Train, 2, pixels.clone(), vec![0, 1]).unwrap().with_normalization(norm);
        let b = ds.batch::<f32>(&[1, 0]);
        assert_eq!(b.labels, vec![1, 0]);
        assert_eq!(ds.denormalize(&b.images.data()[..IMAGE_BYTES]), ds.image_bytes(1));
        assert_eq!(ds.denormalize(&b.images.data()[IMAGE_BYTES..]), ds.image_bytes(0));
    }

    #[test]
    fn rejects_bad_labels() {
        assert!(Dataset::new(Split::Train, 2, vec![0; IMAGE_BYTES], vec![2]).is_err());
    }
}
