use serde::{Deserialize, Serialize};

use super::{AuxHeads, DistillError};
use crate::nn::{FeatureMap, GradMode};
use crate::tensor::kernels;
use crate::tensor::{BnMode, Scalar, Tape, Tensor, TensorError, Var};

/// Hyperparameters of the distillation objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub temperature: f64,
    /// Weight of the KL term inside each per-head loss.
    pub alpha: f64,
    /// Multiplier of the summed per-head losses.
    pub beta: f64,
    /// 1-based units carrying a head; empty reduces to plain KD.
    pub head_units: Vec<usize>,
    /// Weight of the KL term inside the final-output KD loss.
    #[serde(default = "default_kd_alpha")]
    pub kd_alpha: f64,
}

fn default_kd_alpha() -> f64 {
    0.9
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self { temperature: 4.0, alpha: 0.9, beta: 0.5, head_units: vec![1, 2, 3], kd_alpha: 0.9 }
    }
}

impl DistillConfig {
    /// Plain KD at the final outputs, no heads.
    pub fn plain_kd(&self) -> Self {
        Self { beta: 0.0, head_units: Vec::new(), ..self.clone() }
    }

    pub fn is_plain_kd(&self) -> bool {
        self.head_units.is_empty()
    }

    pub fn validate(&self) -> Result<(), DistillError> {
        let bad = |m: String| Err(DistillError::Config(m));
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        for (name, v) in [("alpha", self.alpha), ("kd_alpha", self.kd_alpha)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be non-negative, got {}", self.beta));
        }
        let mut seen = self.head_units.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.head_units.len() || seen.first() == Some(&0) {
            return bad(format!("head_units must be distinct 1-based units, got {:?}", self.head_units));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HeadLoss {
    pub l_kl: f64,
    pub l_ce: f64,
    pub l_ohkd: f64,
}

/// Decomposed losses of one distillation step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_ce_final: f64,
    pub l_kl_final: f64,
    pub l_kd: f64,
    pub per_head: Vec<HeadLoss>,
    pub l_mhkd: f64,
    /// Student head top-1 accuracy on the batch, per head.
    pub head_accuracies: Vec<f64>,
    /// Cross-entropy of each teacher head (trained alongside).
    pub teacher_head_ce: Vec<f64>,
    pub beta: f64,
}

impl LossReport {
    /// `|l_mhkd - (beta * sum l_ohkd + l_kd)| / max(|l_mhkd|, tiny)`.
    pub fn recomposition_error(&self) -> f64 {
        let recomposed = self.beta * self.per_head.iter().map(|h| h.l_ohkd).sum::<f64>() + self.l_kd;
        (self.l_mhkd - recomposed).abs() / self.l_mhkd.abs().max(f64::MIN_POSITIVE)
    }

    pub fn all_non_negative(&self) -> bool {
        let heads = self.per_head.iter().flat_map(|h| [h.l_kl, h.l_ce, h.l_ohkd]);
        [self.l_ce_final, self.l_kl_final, self.l_kd, self.l_mhkd].into_iter().chain(heads).all(|v| v >= 0.0)
    }
}

/// Row-wise softmax of `logits / tau`.
pub fn softmax_t<T: Scalar>(logits: &Tensor<T>, tau: T) -> Result<Tensor<T>, TensorError> {
    let &[_, k] = logits.shape() else {
        return Err(TensorError::Shape {
            op: "softmax_t",
            detail: format!("expected [B,K], got {:?}", logits.shape()),
        });
    };
    if tau.to_f64() <= 0.0 {
        return Err(TensorError::Config { op: "softmax_t", detail: "temperature must be positive".into() });
    }
    Tensor::new(logits.shape(), kernels::softmax_rows(logits.data(), k, tau))
}

/// `tau^2 * KL(p_teacher || p_student)`, batch mean; the teacher is a constant target.
pub fn kl_div_loss<T: Scalar>(tape: &mut Tape<T>, teacher: Var, student: Var, tau: T) -> Result<Var, TensorError> {
    tape.kl_div(teacher, student, tau)
}

pub fn cross_entropy_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
    tape.cross_entropy(logits, labels)
}

/// Loss of a teacher head: plain cross-entropy against the labels.
pub fn teacher_head_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
    cross_entropy_loss(tape, logits, labels)
}

/// Components of a one-head loss, as tape values.
#[derive(Clone, Copy, Debug)]
pub struct OhkdParts {
    pub kl: Var,
    pub ce: Var,
    pub total: Var,
}

/// `alpha * L_KL(teacher, student) + (1 - alpha) * L_CE(labels, student)`.
pub fn ohkd_loss<T: Scalar>(
    tape: &mut Tape<T>,
    teacher_logits: Var,
    student_logits: Var,
    labels: &[usize],
    tau: T,
    alpha: T,
) -> Result<OhkdParts, TensorError> {
    let kl = kl_div_loss(tape, teacher_logits, student_logits, tau)?;
    let ce = cross_entropy_loss(tape, student_logits, labels)?;
    let a = tape.scale(kl, alpha)?;
    let b = tape.scale(ce, T::ONE - alpha)?;
    let total = tape.add(a, b)?;
    Ok(OhkdParts { kl, ce, total })
}

/// Final-output KD loss; the same composition as a one-head loss.
pub fn kd_loss<T: Scalar>(
    tape: &mut Tape<T>,
    teacher_logits: Var,
    student_logits: Var,
    labels: &[usize],
    tau: T,
    kd_alpha: T,
) -> Result<OhkdParts, TensorError> {
    ohkd_loss(tape, teacher_logits, student_logits, labels, tau, kd_alpha)
}

/// Output of [`mhkd_loss`].
#[derive(Debug)]
pub struct MhkdLoss {
    pub total: Var,
    pub report: LossReport,
    pub teacher_head_logits: Vec<Var>,
    pub student_head_logits: Vec<Var>,
    pub teacher_head_params: Vec<Var>,
    pub student_head_params: Vec<Var>,
}

fn item<T: Scalar>(tape: &Tape<T>, v: Var) -> f64 {
    tape.value(v).item().to_f64()
}

pub(crate) fn batch_accuracy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    let k = logits.shape()[1];
    let correct = logits.data().chunks(k).zip(labels).filter(|(row, &y)| argmax(row) == y).count();
    correct as f64 / labels.len().max(1) as f64
}

pub(crate) fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `beta * sum_j L_OHKD^(j) + L_KD`.
///
/// Runs every teacher and student head on its tap (heads in train mode).
/// Teacher head outputs enter the KL terms as constants; teacher taps should
/// come from a frozen forward so no gradient reaches the teacher backbone.
#[allow(clippy::too_many_arguments)]
pub fn mhkd_loss<T: Scalar>(
    tape: &mut Tape<T>,
    taps_t: &[FeatureMap],
    taps_s: &[FeatureMap],
    heads_t: &mut AuxHeads<T>,
    heads_s: &mut AuxHeads<T>,
    final_t: Var,
    final_s: Var,
    labels: &[usize],
    cfg: &DistillConfig,
) -> Result<MhkdLoss, DistillError> {
    let d = cfg.head_units.len();
    if taps_t.len() != d || taps_s.len() != d || heads_t.len() != d || heads_s.len() != d {
        return Err(DistillError::Config(format!(
            "{d} head units but {} teacher taps, {} student taps, {} teacher heads, {} student heads",
            taps_t.len(),
            taps_s.len(),
            heads_t.len(),
            heads_s.len()
        )));
    }
    for (j, &u) in cfg.head_units.iter().enumerate() {
        if taps_t[j].unit_index != u || taps_s[j].unit_index != u || heads_t.units[j] != u || heads_s.units[j] != u {
            return Err(DistillError::Config(format!("taps and heads are not aligned on unit {u}")));
        }
    }
    let tau = T::from_f64(cfg.temperature);
    let alpha = T::from_f64(cfg.alpha);

    let mut out = MhkdLoss {
        total: final_s,
        report: LossReport { beta: cfg.beta, ..Default::default() },
        teacher_head_logits: Vec::with_capacity(d),
        student_head_logits: Vec::with_capacity(d),
        teacher_head_params: Vec::new(),
        student_head_params: Vec::new(),
    };
    let mut head_sum: Option<Var> = None;
    for j in 0..d {
        let (lt, pt) = heads_t.heads[j].forward(tape, taps_t[j].var, BnMode::Train, GradMode::Track)?;
        let (ls, ps) = heads_s.heads[j].forward(tape, taps_s[j].var, BnMode::Train, GradMode::Track)?;
        out.teacher_head_params.extend(pt);
        out.student_head_params.extend(ps);
        let parts = ohkd_loss(tape, lt, ls, labels, tau, alpha)?;
        out.report.per_head.push(HeadLoss {
            l_kl: item(tape, parts.kl),
            l_ce: item(tape, parts.ce),
            l_ohkd: item(tape, parts.total),
        });
        out.report.head_accuracies.push(batch_accuracy(tape.value(ls), labels));
        head_sum = Some(match head_sum {
            None => parts.total,
            Some(acc) => tape.add(acc, parts.total)?,
        });
        out.teacher_head_logits.push(lt);
        out.student_head_logits.push(ls);
    }
    let kd = kd_loss(tape, final_t, final_s, labels, tau, T::from_f64(cfg.kd_alpha))?;
    out.report.l_kl_final = item(tape, kd.kl);
    out.report.l_ce_final = item(tape, kd.ce);
    out.report.l_kd = item(tape, kd.total);
    out.total = match head_sum {
        None => kd.total,
        Some(sum) => {
            let weighted = tape.scale(sum, T::from_f64(cfg.beta))?;
            tape.add(weighted, kd.total)?
        }
    };
    out.report.l_mhkd = item(tape, out.total);
    Ok(out)
}
