use std::time::Instant;

use super::{
    diverged, epoch_batches, evaluate, lr_at, mean, EpochRecord, OptimConfig, RunSeeds, Sgd, TrainError, TrainOptions,
};
use crate::data::Dataset;
use crate::distill::{batch_accuracy, cross_entropy_loss};
use crate::nn::{GradMode, Network, NetworkSpec, Parameterized, Source, TaskSpec};
use crate::tensor::{BnMode, Scalar, Tape};

/// Result of plain cross-entropy training.
#[derive(Clone, Debug)]
pub struct SupervisedOutcome<T: Scalar> {
    /// Weights after the last epoch.
    pub network: Network<T>,
    /// Weights at the epoch with the highest test accuracy (earliest on ties).
    pub best: Network<T>,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub seeds: RunSeeds,
    pub optimizer: Sgd<T>,
}

impl<T: Scalar> SupervisedOutcome<T> {
    pub fn final_test_acc(&self) -> f64 {
        self.history.last().map_or(0.0, |r| r.test_acc)
    }
}

/// Cross-entropy training from scratch, as used for teachers and for the
/// student-from-scratch baseline.
#[allow(clippy::too_many_arguments)]
pub fn train_supervised<T: Scalar>(
    spec: &NetworkSpec,
    task: &TaskSpec,
    source: Source,
    train: &Dataset,
    test: &Dataset,
    optim: &OptimConfig,
    seed: u64,
    opts: &TrainOptions,
) -> Result<SupervisedOutcome<T>, TrainError> {
    optim.validate()?;
    if train.num_classes != task.num_classes {
        return Err(TrainError::Config(format!(
            "dataset has {} classes, task expects {}",
            train.num_classes, task.num_classes
        )));
    }
    let seeds = RunSeeds::new(seed);
    let mut net = Network::<T>::build(spec, task, source, seeds.init)?;
    let mut sgd = Sgd::new();
    let mut history = Vec::with_capacity(optim.epochs);
    let mut best = (0, f64::NEG_INFINITY, net.clone());
    let mut step = 0;
    for epoch in 0..optim.epochs {
        let started = Instant::now();
        let lr = lr_at(optim, epoch);
        let mut losses = Vec::new();
        let mut accs = Vec::new();
        for batch in epoch_batches::<T>(train, optim.batch_size, &seeds, epoch, opts.augment.as_ref()) {
            let mut tape = Tape::new();
            let x = tape.constant(batch.images);
            let out =
                net.forward_with_taps(&mut tape, x, &[], BnMode::Train, GradMode::Track).map_err(|e| match e {
                    crate::nn::NnError::Tensor(t) => diverged(epoch, step, t),
                    other => other.into(),
                })?;
            let loss =
                cross_entropy_loss(&mut tape, out.logits, &batch.labels).map_err(|e| diverged(epoch, step, e))?;
            let value = tape.value(loss).item().to_f64();
            if !value.is_finite() {
                return Err(TrainError::Diverged { epoch, step, detail: format!("cross-entropy = {value}") });
            }
            accs.push(batch_accuracy(tape.value(out.logits), &batch.labels));
            tape.backward(loss)?;
            net.pull_grads(&tape, &out.params);
            sgd.step(&mut net, optim, lr)?;
            losses.push(value);
            step += 1;
        }
        let test_acc = evaluate(&net, test, opts.eval_batch_size)?;
        if test_acc > best.1 {
            best = (epoch, test_acc, net.clone());
        }
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: mean(losses),
            train_acc: mean(accs),
            test_acc,
            seconds: started.elapsed().as_secs_f64(),
            ..Default::default()
        };
        if opts.verbose {
            eprintln!(
                "[{}] epoch {epoch:>3} lr {lr:.4} loss {:.4} train {:.2}% test {:.2}% ({:.1}s)",
                spec.name,
                record.train_loss,
                record.train_acc * 100.0,
                test_acc * 100.0,
                record.seconds
            );
        }
        history.push(record);
    }
    Ok(SupervisedOutcome { network: net, best: best.2, best_epoch: best.0, history, seeds, optimizer: sgd })
}

/// Teacher pre-training with cross-entropy.
pub fn train_teacher<T: Scalar>(
    spec: &NetworkSpec,
    task: &TaskSpec,
    train: &Dataset,
    test: &Dataset,
    optim: &OptimConfig,
    seed: u64,
    opts: &TrainOptions,
) -> Result<SupervisedOutcome<T>, TrainError> {
    train_supervised(spec, task, Source::Teacher, train, test, optim, seed, opts)
}
