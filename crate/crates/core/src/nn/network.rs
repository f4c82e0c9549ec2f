use super::layers::{fc_stack, Conv, ForwardCtx, GradMode, Linear, Parameterized};
use super::{NetworkSpec, NnError, PoolSpec, TaskSpec};
use crate::rng;
use crate::tensor::{BnMode, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Teacher,
    Student,
}

/// Activation captured at the end of a unit.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    pub var: Var,
    /// 1-based unit index.
    pub unit_index: usize,
    pub source: Source,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Unit<T: Scalar> {
    pub convs: Vec<Conv<T>>,
    pub pool: Option<PoolSpec>,
}

#[derive(Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    pub taps: Vec<FeatureMap>,
    /// Parameter leaves in `params()` order; empty for frozen forwards.
    pub params: Vec<Var>,
}

/// A unit-structured CNN: conv units, then GAP and an FC classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T: Scalar> {
    pub spec: NetworkSpec,
    pub task: TaskSpec,
    pub source: Source,
    pub units: Vec<Unit<T>>,
    pub classifier: Vec<Linear<T>>,
}

impl<T: Scalar> Network<T> {
    /// Builds and initializes all parameters deterministically from `seed`.
    pub fn build(spec: &NetworkSpec, task: &TaskSpec, source: Source, seed: u64) -> Result<Self, NnError> {
        spec.validate(task)?;
        let mut rng = rng::rng(seed);
        let units = spec
            .units
            .iter()
            .map(|u| Unit { convs: u.layers.iter().map(|l| Conv::new(l.clone(), &mut rng)).collect(), pool: u.pool })
            .collect();
        let mut widths = vec![spec.feature_channels()];
        widths.extend(&spec.classifier.hidden);
        widths.push(task.num_classes);
        let classifier = widths.windows(2).map(|p| Linear::new(p[0], p[1], &mut rng)).collect();
        Ok(Self { spec: spec.clone(), task: *task, source, units, classifier })
    }

    pub fn num_units(&self) -> usize {
        self.units.len()
    }

    /// Forward pass capturing the post-activation, post-pool output of each
    /// unit in `tap_units` (1-based). Train mode updates batchnorm running
    /// statistics after the pass.
    pub fn forward_with_taps(
        &mut self,
        tape: &mut Tape<T>,
        input: Var,
        tap_units: &[usize],
        mode: BnMode,
        grad: GradMode,
    ) -> Result<ForwardOutput, NnError> {
        let mut ctx = ForwardCtx::default();
        let out = self.forward_inner(tape, input, tap_units, mode, grad, &mut ctx)?;
        if mode == BnMode::Train {
            let mut stats = ctx.bn_stats.iter();
            for conv in self.units.iter_mut().flat_map(|u| &mut u.convs) {
                conv.apply_stats(&mut stats);
            }
        }
        Ok(ForwardOutput { logits: out.0, taps: out.1, params: ctx.params })
    }

    fn forward_inner(
        &self,
        tape: &mut Tape<T>,
        input: Var,
        tap_units: &[usize],
        mode: BnMode,
        grad: GradMode,
        ctx: &mut ForwardCtx<T>,
    ) -> Result<(Var, Vec<FeatureMap>), NnError> {
        if let Some(&bad) = tap_units.iter().find(|&&u| u == 0 || u > self.units.len()) {
            return Err(NnError::TapRange { unit: bad, units: self.units.len() });
        }
        let mut taps = Vec::with_capacity(tap_units.len());
        let mut h = input;
        for (i, unit) in self.units.iter().enumerate() {
            for conv in &unit.convs {
                h = conv.forward(tape, h, mode, grad, ctx)?;
            }
            if let Some(p) = unit.pool {
                h = tape.max_pool2d(h, p.kernel, p.stride)?;
            }
            for _ in tap_units.iter().filter(|&&u| u == i + 1) {
                taps.push(FeatureMap { var: h, unit_index: i + 1, source: self.source, shape: tape.shape(h).to_vec() });
            }
        }
        let logits = fc_stack(&self.classifier, tape, h, grad, ctx)?;
        // Taps in the order requested.
        let ordered = tap_units
            .iter()
            .map(|u| taps.iter().find(|t| t.unit_index == *u).cloned().expect("tap captured"))
            .collect();
        Ok((logits, ordered))
    }

    /// Eval-mode forward on a shared tape with constant parameters. No
    /// gradient can reach this network's weights through the result.
    pub fn forward_frozen(
        &self,
        tape: &mut Tape<T>,
        input: Var,
        tap_units: &[usize],
    ) -> Result<ForwardOutput, NnError> {
        let mut ctx = ForwardCtx::default();
        let (logits, taps) = self.forward_inner(tape, input, tap_units, BnMode::Eval, GradMode::Frozen, &mut ctx)?;
        Ok(ForwardOutput { logits, taps, params: Vec::new() })
    }

    /// Eval-mode logits for a batch, without recording gradients.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let mut tape = Tape::new();
        let x = tape.leaf_ref(images);
        let (logits, _) =
            self.forward_inner(&mut tape, x, &[], BnMode::Eval, GradMode::Frozen, &mut ForwardCtx::default())?;
        Ok(tape.value(logits).clone())
    }

    /// Eval-mode logits and unit features, without recording gradients.
    pub fn predict_with_taps(
        &self,
        images: &Tensor<T>,
        tap_units: &[usize],
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>), NnError> {
        let mut tape = Tape::new();
        let x = tape.leaf_ref(images);
        let (logits, taps) =
            self.forward_inner(&mut tape, x, tap_units, BnMode::Eval, GradMode::Frozen, &mut ForwardCtx::default())?;
        Ok((tape.value(logits).clone(), taps.iter().map(|t| tape.value(t.var).clone()).collect()))
    }

    /// Bit-exact equality of all parameters and buffers.
    pub fn bit_eq(&self, other: &Self) -> bool {
        let a = self.params().into_iter().chain(self.buffers());
        let b = other.params().into_iter().chain(other.buffers());
        self.spec == other.spec && a.zip(b).all(|((na, ta), (nb, tb))| na == nb && ta.bit_eq(tb))
    }
}

impl<T: Scalar> Parameterized<T> for Network<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (ui, u) in self.units.iter().enumerate() {
            for (li, c) in u.convs.iter().enumerate() {
                c.visit(&format!("unit{}.conv{li}", ui + 1), &mut out);
            }
        }
        for (i, fc) in self.classifier.iter().enumerate() {
            fc.visit(&format!("classifier.fc{i}"), &mut out);
        }
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (ui, u) in self.units.iter_mut().enumerate() {
            for (li, c) in u.convs.iter_mut().enumerate() {
                c.visit_mut(&format!("unit{}.conv{li}", ui + 1), &mut out);
            }
        }
        for (i, fc) in self.classifier.iter_mut().enumerate() {
            fc.visit_mut(&format!("classifier.fc{i}"), &mut out);
        }
        out
    }

    fn buffers(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (ui, u) in self.units.iter().enumerate() {
            for (li, c) in u.convs.iter().enumerate() {
                c.visit_buffers(&format!("unit{}.conv{li}", ui + 1), &mut out);
            }
        }
        out
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (ui, u) in self.units.iter_mut().enumerate() {
            for (li, c) in u.convs.iter_mut().enumerate() {
                c.visit_buffers_mut(&format!("unit{}.conv{li}", ui + 1), &mut out);
            }
        }
        out
    }
}

/// `100 * (1 - student / teacher)`.
pub fn compression_percent(student_params: usize, teacher_params: usize) -> f64 {
    100.0 * (1.0 - student_params as f64 / teacher_params as f64)
}
