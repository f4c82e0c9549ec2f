use std::time::Instant;

use super::{
    diverged, epoch_batches, evaluate, lr_at, mean, EpochRecord, OptimConfig, RunSeeds, Sgd, StepRecord, TrainError,
    TrainOptions, RECOMPOSITION_TOL,
};
use crate::data::Dataset;
use crate::distill::{
    batch_accuracy, mhkd_loss, teacher_head_loss, AuxHeadSpec, AuxHeads, DistillConfig, DistillError,
};
use crate::nn::{GradMode, Network, NetworkSpec, NnError, Parameterized, Source};
use crate::tensor::{BnMode, Scalar, Tape};

/// Result of distilling a student.
#[derive(Clone, Debug)]
pub struct StudentOutcome<T: Scalar> {
    pub student: Network<T>,
    pub teacher_heads: AuxHeads<T>,
    pub student_heads: AuxHeads<T>,
    pub history: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    pub seeds: RunSeeds,
    pub student_optimizer: Sgd<T>,
    pub student_heads_optimizer: Sgd<T>,
    pub teacher_heads_optimizer: Sgd<T>,
}

impl<T: Scalar> StudentOutcome<T> {
    pub fn final_test_acc(&self) -> f64 {
        self.history.last().map_or(0.0, |r| r.test_acc)
    }
}

fn nn_err(epoch: usize, step: usize) -> impl Fn(NnError) -> TrainError {
    move |e| match e {
        NnError::Tensor(t) => diverged(epoch, step, t),
        other => other.into(),
    }
}

/// Distills `teacher` into a freshly initialized student.
///
/// Per step the teacher runs a frozen eval-mode forward; its heads are trained
/// on the labels alongside the student and its heads. With an empty
/// `cfg.head_units` this is plain KD at the final outputs. The teacher is
/// borrowed immutably, so its backbone cannot change.
#[allow(clippy::too_many_arguments)]
pub fn train_student<T: Scalar>(
    teacher: &Network<T>,
    student_spec: &NetworkSpec,
    head_spec: &AuxHeadSpec,
    cfg: &DistillConfig,
    optim: &OptimConfig,
    train: &Dataset,
    test: &Dataset,
    seed: u64,
    opts: &TrainOptions,
) -> Result<StudentOutcome<T>, TrainError> {
    optim.validate()?;
    cfg.validate()?;
    let task = teacher.task;
    if train.num_classes != task.num_classes {
        return Err(TrainError::Config(format!(
            "dataset has {} classes, teacher predicts {}",
            train.num_classes, task.num_classes
        )));
    }
    let units = teacher.num_units().min(student_spec.num_units());
    if let Some(&u) = cfg.head_units.iter().find(|&&u| u > units) {
        return Err(DistillError::Config(format!("head unit {u} exceeds the {units} units both networks share")).into());
    }
    if !cfg.head_units.is_empty() {
        head_spec.validate()?;
    }
    let seeds = RunSeeds::new(seed);
    let mut student = Network::<T>::build(student_spec, &task, Source::Student, seeds.init)?;
    let mut heads_t = AuxHeads::build(
        head_spec,
        &cfg.head_units,
        |u| teacher.spec.unit_channels(u),
        task.num_classes,
        seeds.teacher_heads,
    )?;
    let mut heads_s = AuxHeads::build(
        head_spec,
        &cfg.head_units,
        |u| student_spec.unit_channels(u),
        task.num_classes,
        seeds.student_heads,
    )?;
    let (mut sgd_s, mut sgd_hs, mut sgd_ht) = (Sgd::new(), Sgd::new(), Sgd::new());
    let d = cfg.head_units.len();
    let mut history = Vec::with_capacity(optim.epochs);
    let mut steps = Vec::new();
    let mut step = 0;
    for epoch in 0..optim.epochs {
        let started = Instant::now();
        let lr = lr_at(optim, epoch);
        let mut reports = Vec::new();
        let mut accs = Vec::new();
        for batch in epoch_batches::<T>(train, optim.batch_size, &seeds, epoch, opts.augment.as_ref()) {
            let mut tape = Tape::new();
            let x = tape.constant(batch.images);
            let t_out = teacher.forward_frozen(&mut tape, x, &cfg.head_units).map_err(nn_err(epoch, step))?;
            let s_out = student
                .forward_with_taps(&mut tape, x, &cfg.head_units, BnMode::Train, GradMode::Track)
                .map_err(nn_err(epoch, step))?;
            let loss = mhkd_loss(
                &mut tape,
                &t_out.taps,
                &s_out.taps,
                &mut heads_t,
                &mut heads_s,
                t_out.logits,
                s_out.logits,
                &batch.labels,
                cfg,
            )
            .map_err(|e| match e {
                DistillError::Tensor(t) | DistillError::Nn(NnError::Tensor(t)) => diverged(epoch, step, t),
                other => other.into(),
            })?;
            let mut report = loss.report;
            let mut objective = loss.total;
            for &lt in &loss.teacher_head_logits {
                let ce = teacher_head_loss(&mut tape, lt, &batch.labels).map_err(|e| diverged(epoch, step, e))?;
                report.teacher_head_ce.push(tape.value(ce).item().to_f64());
                objective = tape.add(objective, ce)?;
            }
            if !report.l_mhkd.is_finite() || report.teacher_head_ce.iter().any(|v| !v.is_finite()) {
                return Err(TrainError::Diverged { epoch, step, detail: format!("loss report {report:?}") });
            }
            let error = report.recomposition_error();
            if error > RECOMPOSITION_TOL {
                return Err(TrainError::Recomposition { epoch, step, error });
            }
            accs.push(batch_accuracy(tape.value(s_out.logits), &batch.labels));
            tape.backward(objective)?;
            student.pull_grads(&tape, &s_out.params);
            heads_s.pull_grads(&tape, &loss.student_head_params);
            heads_t.pull_grads(&tape, &loss.teacher_head_params);
            sgd_s.step(&mut student, optim, lr)?;
            sgd_hs.step(&mut heads_s, optim, lr)?;
            sgd_ht.step(&mut heads_t, optim, lr)?;
            reports.push(report.clone());
            steps.push(StepRecord { epoch, step, lr, report });
            step += 1;
        }
        let test_acc = evaluate(&student, test, opts.eval_batch_size)?;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: mean(reports.iter().map(|r| r.l_mhkd)),
            l_kd: mean(reports.iter().map(|r| r.l_kd)),
            l_ohkd: (0..d).map(|j| mean(reports.iter().map(|r| r.per_head[j].l_ohkd))).collect(),
            head_acc: (0..d).map(|j| mean(reports.iter().map(|r| r.head_accuracies[j]))).collect(),
            train_acc: mean(accs),
            test_acc,
            seconds: started.elapsed().as_secs_f64(),
        };
        if opts.verbose {
            let heads: Vec<String> = record.l_ohkd.iter().map(|l| format!("{l:.3}")).collect();
            eprintln!(
                "[{}] epoch {epoch:>3} lr {lr:.4} loss {:.4} kd {:.4} heads [{}] test {:.2}% ({:.1}s)",
                student_spec.name,
                record.train_loss,
                record.l_kd,
                heads.join(", "),
                test_acc * 100.0,
                record.seconds
            );
        }
        history.push(record);
    }
    Ok(StudentOutcome {
        student,
        teacher_heads: heads_t,
        student_heads: heads_s,
        history,
        steps,
        seeds,
        student_optimizer: sgd_s,
        student_heads_optimizer: sgd_hs,
        teacher_heads_optimizer: sgd_ht,
    })
}
