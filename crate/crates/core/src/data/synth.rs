//! Deterministic class-conditional image generator.
//!
//! Each class is a colored sinusoidal grating with its own orientation,
//! frequency and color. `difficulty` in [0, 1] (values above 1 extend the
//! noise) controls the nuisance factors: random grating phase, a faint
//! grating from another class, and Gaussian pixel noise. At difficulty 0
//! every image of a class is its prototype up to a small brightness jitter.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, Normalization, Split, CHANNELS, IMAGE_BYTES, SIDE};
use crate::rng::{self, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
    pub difficulty: f64,
}

#[derive(Clone, Copy, Debug)]
struct ClassPattern {
    theta: f64,
    freq: f64,
    color: [f64; CHANNELS],
}

const FREQS: [f64; 3] = [3.0, 5.0, 8.0];
const AMPLITUDE: f64 = 0.3;
const DISTRACTOR: f64 = 0.6;
const NOISE: f64 = 0.15;
const JITTER: f64 = 0.02;

fn class_pattern(k: usize) -> ClassPattern {
    let mut r = rng::rng(rng::derive(0x5eed_c1a5, k as u64));
    ClassPattern {
        theta: (k % 4) as f64 * PI / 4.0,
        freq: FREQS[(k / 4) % FREQS.len()],
        color: [r.random_range(0.2..1.0), r.random_range(0.2..1.0), r.random_range(0.2..1.0)],
    }
}

fn add_grating(img: &mut [f64], p: &ClassPattern, amplitude: f64, phase: f64) {
    let plane = SIDE * SIDE;
    let (s, c) = p.theta.sin_cos();
    for y in 0..SIDE {
        for x in 0..SIDE {
            let t = 2.0 * PI * p.freq * (x as f64 * c + y as f64 * s) / SIDE as f64 + phase;
            let v = amplitude * t.sin();
            for ch in 0..CHANNELS {
                img[ch * plane + y * SIDE + x] += p.color[ch] * v;
            }
        }
    }
}

fn sample(class: usize, patterns: &[ClassPattern], d: f64, rng: &mut Rng) -> Vec<u8> {
    let nuisance = d.min(1.0);
    let mut img = vec![0.5 + rng.random_range(-JITTER..=JITTER); IMAGE_BYTES];
    let phase = nuisance * rng.random_range(0.0..2.0 * PI);
    add_grating(&mut img, &patterns[class], AMPLITUDE, phase);
    if nuisance > 0.0 && patterns.len() > 1 {
        let other = (class + rng.random_range(1..patterns.len())) % patterns.len();
        let phase = rng.random_range(0.0..2.0 * PI);
        add_grating(&mut img, &patterns[other], DISTRACTOR * AMPLITUDE * nuisance, phase);
    }
    if d > 0.0 {
        let noise = Normal::new(0.0, NOISE * d).expect("finite noise");
        img.iter_mut().for_each(|v| *v += noise.sample(rng));
    }
    img.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect()
}

fn generate(spec: &SynthSpec, per_class: usize, stream: u64, split: Split) -> Result<Dataset, DataError> {
    let patterns: Vec<_> = (0..spec.num_classes).map(class_pattern).collect();
    let mut r = rng::rng(rng::derive(spec.seed, stream));
    let n = per_class * spec.num_classes;
    let labels: Vec<usize> = (0..n).map(|i| i % spec.num_classes).collect();
    let mut pixels = Vec::with_capacity(n * IMAGE_BYTES);
    for &l in &labels {
        pixels.extend(sample(l, &patterns, spec.difficulty, &mut r));
    }
    Dataset::new(split, spec.num_classes, pixels, labels)
}

impl SynthSpec {
    pub fn generate(&self) -> Result<(Dataset, Dataset), DataError> {
        if self.num_classes < 2 {
            return Err(DataError::Invalid(format!(
                "synthetic data needs at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.num_classes > 256 || self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(DataError::Invalid("synthetic data needs 2..=256 classes and non-empty splits".into()));
        }
        if !(self.difficulty >= 0.0 && self.difficulty.is_finite()) {
            return Err(DataError::Invalid(format!("difficulty must be non-negative, got {}", self.difficulty)));
        }
        let train = generate(self, self.train_per_class, rng::stream::DATA, Split::Train)?;
        let test = generate(self, self.test_per_class, rng::stream::DATA + 1, Split::Test)?;
        let norm = Normalization::from_pixels(train.pixels());
        Ok((train.with_normalization(norm.clone()), test.with_normalization(norm)))
    }
}

/// `n_per_class` images per class in both splits.
pub fn synth_dataset(
    k: usize,
    n_per_class: usize,
    seed: u64,
    difficulty: f64,
) -> Result<(Dataset, Dataset), DataError> {
    SynthSpec { num_classes: k, train_per_class: n_per_class, test_per_class: n_per_class, seed, difficulty }.generate()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_histogram_and_determinism() {
        let (train, test) = synth_dataset(5, 7, 11, 0.5).unwrap();
        assert_eq!(train.class_histogram(), vec![7; 5]);
        assert_eq!(test.class_histogram(), vec![7; 5]);
        let (again, _) = synth_dataset(5, 7, 11, 0.5).unwrap();
        assert_eq!(train, again);
        let (other, _) = synth_dataset(5, 7, 12, 0.5).unwrap();
        assert_ne!(train.pixels(), other.pixels());
    }

    #[test]
    fn splits_are_disjoint() {
        let (train, test) = synth_dataset(4, 10, 3, 0.0).unwrap();
        for i in 0..test.len() {
            assert!((0..train.len()).all(|j| train.image_bytes(j) != test.image_bytes(i)));
        }
    }

    #[test]
    fn rejects_single_class() {
        assert!(synth_dataset(1, 5, 0, 0.0).is_err());
    }
}
