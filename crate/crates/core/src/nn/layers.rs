use rand_distr::{Distribution, Normal};

use super::{Activation, ConvLayerSpec, NnError};
use crate::rng::Rng;
use crate::tensor::kernels::BatchStats;
use crate::tensor::{BnMode, Scalar, Tape, Tensor, Var};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Whether parameters enter the tape as trainable leaves or constants.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradMode {
    Track,
    Frozen,
}

/// Per-forward bookkeeping: parameter leaves (in visit order) and the batch
/// statistics to fold into running stats once the forward is done.
#[derive(Debug, Default)]
pub struct ForwardCtx<T: Scalar> {
    pub params: Vec<Var>,
    pub bn_stats: Vec<BatchStats<T>>,
}

impl<T: Scalar> ForwardCtx<T> {
    fn bind(&mut self, tape: &mut Tape<T>, p: &Tensor<T>, grad: GradMode) -> Var {
        match grad {
            GradMode::Track => {
                let var = tape.leaf(Tensor::new(p.shape(), p.data().to_vec()).expect("shape").with_requires_grad(true));
                self.params.push(var);
                var
            }
            GradMode::Frozen => tape.constant(Tensor::new(p.shape(), p.data().to_vec()).expect("shape")),
        }
    }
}

/// He-style normal init with standard deviation `sqrt(2 / fan_in)`.
pub(crate) fn he_normal<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<T> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(normal.sample(rng))).collect();
    Tensor::new(shape, data).expect("shape")
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], T::ONE),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::ONE),
        }
    }

    fn apply_stats(&mut self, stats: &BatchStats<T>) {
        let m = T::from_f64(BN_MOMENTUM);
        let keep = T::ONE - m;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = keep * *r + m * b;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv<T: Scalar> {
    pub spec: ConvLayerSpec,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub bn: Option<BatchNorm<T>>,
}

impl<T: Scalar> Conv<T> {
    pub fn new(spec: ConvLayerSpec, rng: &mut Rng) -> Self {
        let fan_in = spec.in_channels * spec.kernel_h * spec.kernel_w;
        let weight = he_normal(&spec.weight_shape(), fan_in, rng);
        let bias = Tensor::zeros(&[spec.out_channels]);
        let bn = spec.has_bn.then(|| BatchNorm::new(spec.out_channels));
        Self { spec, weight, bias, bn }
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        mode: BnMode,
        grad: GradMode,
        ctx: &mut ForwardCtx<T>,
    ) -> Result<Var, NnError> {
        let w = ctx.bind(tape, &self.weight, grad);
        let b = ctx.bind(tape, &self.bias, grad);
        let mut y = tape.conv2d(x, w, Some(b), self.spec.stride, self.spec.padding)?;
        if let Some(bn) = &self.bn {
            let g = ctx.bind(tape, &bn.gamma, grad);
            let be = ctx.bind(tape, &bn.beta, grad);
            let (out, stats) =
                tape.batchnorm2d(y, g, be, bn.running_mean.data(), bn.running_var.data(), mode, T::from_f64(BN_EPS))?;
            y = out;
            ctx.bn_stats.extend(stats);
        }
        if self.spec.activation == Activation::Relu {
            y = tape.relu(y)?;
        }
        Ok(y)
    }

    /// Consumes this layer's share of `stats` (in forward order).
    pub(crate) fn apply_stats<'a>(&mut self, stats: &mut impl Iterator<Item = &'a BatchStats<T>>) {
        if let Some(bn) = &mut self.bn {
            if let Some(s) = stats.next() {
                bn.apply_stats(s);
            }
        }
    }

    pub(crate) fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
        if let Some(bn) = &self.bn {
            out.push((format!("{prefix}.bn.gamma"), &bn.gamma));
            out.push((format!("{prefix}.bn.beta"), &bn.beta));
        }
    }

    pub(crate) fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((format!("{prefix}.weight"), &mut self.weight));
        out.push((format!("{prefix}.bias"), &mut self.bias));
        if let Some(bn) = &mut self.bn {
            out.push((format!("{prefix}.bn.gamma"), &mut bn.gamma));
            out.push((format!("{prefix}.bn.beta"), &mut bn.beta));
        }
    }

    pub(crate) fn visit_buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        if let Some(bn) = &self.bn {
            out.push((format!("{prefix}.bn.running_mean"), &bn.running_mean));
            out.push((format!("{prefix}.bn.running_var"), &bn.running_var));
        }
    }

    pub(crate) fn visit_buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        if let Some(bn) = &mut self.bn {
            out.push((format!("{prefix}.bn.running_mean"), &mut bn.running_mean));
            out.push((format!("{prefix}.bn.running_var"), &mut bn.running_var));
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(f_in: usize, f_out: usize, rng: &mut Rng) -> Self {
        Self { weight: he_normal(&[f_out, f_in], f_in, rng), bias: Tensor::zeros(&[f_out]) }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var, grad: GradMode, ctx: &mut ForwardCtx<T>) -> Result<Var, NnError> {
        let w = ctx.bind(tape, &self.weight, grad);
        let b = ctx.bind(tape, &self.bias, grad);
        Ok(tape.linear(x, w, b)?)
    }

    pub(crate) fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    pub(crate) fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((format!("{prefix}.weight"), &mut self.weight));
        out.push((format!("{prefix}.bias"), &mut self.bias));
    }
}

/// GAP, then `linears` with ReLU between consecutive layers.
pub(crate) fn fc_stack<T: Scalar>(
    linears: &[Linear<T>],
    tape: &mut Tape<T>,
    x: Var,
    grad: GradMode,
    ctx: &mut ForwardCtx<T>,
) -> Result<Var, NnError> {
    let mut h = tape.global_avg_pool(x)?;
    for (i, fc) in linears.iter().enumerate() {
        h = fc.forward(tape, h, grad, ctx)?;
        if i + 1 < linears.len() {
            h = tape.relu(h)?;
        }
    }
    Ok(h)
}

/// A set of named trainable tensors plus non-trainable buffers.
pub trait Parameterized<T: Scalar> {
    /// Trainable tensors in forward binding order.
    fn params(&self) -> Vec<(String, &Tensor<T>)>;
    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)>;
    fn buffers(&self) -> Vec<(String, &Tensor<T>)>;
    fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)>;

    /// Scalar parameter count (buffers excluded).
    fn count_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Adds tape gradients of the bound leaves into each parameter's `grad`.
    fn pull_grads(&mut self, tape: &Tape<T>, bound: &[Var]) {
        let params = self.params_mut();
        debug_assert_eq!(params.len(), bound.len());
        for ((_, p), &v) in params.into_iter().zip(bound) {
            if let Some(g) = tape.grad(v) {
                p.accumulate_grad(g);
            }
        }
    }

    fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(|(_, p)| p.zero_grad());
    }
}
