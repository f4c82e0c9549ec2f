//! Optimizer, training loops and evaluation.

mod distill;
mod optim;
mod supervised;

pub use distill::{train_student, StudentOutcome};
pub use optim::{decays, lr_at, sgd_step, OptimConfig, Sgd};
pub use supervised::{train_supervised, train_teacher, SupervisedOutcome};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{batch, AugmentPolicy, DataError, Dataset, LabeledBatch};
use crate::distill::{batch_accuracy, DistillError, LossReport};
use crate::nn::{Network, NnError};
use crate::rng;
use crate::tensor::{Scalar, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training config: {0}")]
    Config(String),
    #[error("internal contract violated: {0}")]
    Contract(String),
    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged { epoch: usize, step: usize, detail: String },
    #[error("loss recomposition error {error:.3e} at epoch {epoch}, step {step}")]
    Recomposition { epoch: usize, step: usize, error: f64 },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Tolerance on `|l_mhkd - (beta * sum l_ohkd + l_kd)| / |l_mhkd|` per step.
pub const RECOMPOSITION_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    /// `None` trains on the raw normalized images.
    pub augment: Option<AugmentPolicy>,
    pub eval_batch_size: usize,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { augment: Some(AugmentPolicy::default()), eval_batch_size: 256, verbose: false }
    }
}

/// Per-epoch metrics. Head entries are empty for runs without heads.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean training objective over the epoch's steps.
    pub train_loss: f64,
    /// Mean final-output KD loss; zero for supervised runs.
    pub l_kd: f64,
    pub l_ohkd: Vec<f64>,
    /// Mean student head accuracy on training batches.
    pub head_acc: Vec<f64>,
    pub train_acc: f64,
    pub test_acc: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub report: LossReport,
}

/// Seed streams of a run, derived from one base seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSeeds {
    pub base: u64,
    pub init: u64,
    pub shuffle: u64,
    pub augment: u64,
    pub teacher_heads: u64,
    pub student_heads: u64,
}

impl RunSeeds {
    pub fn new(base: u64) -> Self {
        use rng::stream::*;
        Self {
            base,
            init: rng::derive(base, INIT),
            shuffle: rng::derive(base, SHUFFLE),
            augment: rng::derive(base, AUGMENT),
            teacher_heads: rng::derive(base, TEACHER_HEADS),
            student_heads: rng::derive(base, STUDENT_HEADS),
        }
    }

    pub(crate) fn augment_rng(&self, epoch: usize) -> rng::Rng {
        rng::rng(rng::derive(self.augment, epoch as u64))
    }
}

/// Training batches of one epoch. A trailing single-sample batch is dropped
/// because batchnorm cannot normalize it.
pub(crate) fn epoch_batches<T: Scalar>(
    ds: &Dataset,
    batch_size: usize,
    seeds: &RunSeeds,
    epoch: usize,
    augment: Option<&AugmentPolicy>,
) -> Vec<LabeledBatch<T>> {
    let mut aug_rng = seeds.augment_rng(epoch);
    batch::batch_iter::<T>(ds, batch_size, seeds.shuffle, epoch)
        .filter(|b| b.labels.len() >= 2)
        .map(|b| match augment {
            Some(p) => crate::data::augment(&b, &mut aug_rng, p),
            None => b,
        })
        .collect()
}

/// Top-1 accuracy in eval mode, as a fraction.
pub fn evaluate<T: Scalar>(net: &Network<T>, ds: &Dataset, batch_size: usize) -> Result<f64, TrainError> {
    let mut correct = 0.0;
    for idx in batch::sequential_batches(ds.len(), batch_size) {
        let b = ds.batch::<T>(&idx);
        let logits = net.predict(&b.images)?;
        correct += batch_accuracy(&logits, &b.labels) * idx.len() as f64;
    }
    Ok(correct / ds.len() as f64)
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Accuracies (fractions) as a percentage cell, e.g. `75.28 (0.26)`.
pub fn format_mean_std(accuracies: &[f64]) -> String {
    let pct: Vec<f64> = accuracies.iter().map(|a| a * 100.0).collect();
    let (m, s) = mean_std(&pct);
    format!("{m:.2} ({s:.2})")
}

pub(crate) fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub(crate) fn diverged(epoch: usize, step: usize, e: TensorError) -> TrainError {
    match e {
        TensorError::NonFinite { op } => {
            TrainError::Diverged { epoch, step, detail: format!("non-finite value produced by {op}") }
        }
        other => TrainError::Tensor(other),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_matches_hand_values() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[7.0]), (7.0, 0.0));
        assert_eq!(format_mean_std(&[0.75, 0.76]), "75.50 (0.71)");
    }

    #[test]
    fn seed_streams_differ() {
        let s = RunSeeds::new(1);
        let all = [s.init, s.shuffle, s.augment, s.teacher_heads, s.student_heads];
        let mut dedup = all.to_vec();
        dedup.sort_unstable();
        dedup.dedup();
        assert_eq!(dedup.len(), all.len());
        assert_ne!(RunSeeds::new(2), s);
    }
}
