use serde::{Deserialize, Serialize};

use crate::nn::layers::{fc_stack, Conv, ForwardCtx, Linear};
use crate::nn::{Activation, ConvLayerSpec, GradMode, NnError, Parameterized};
use crate::rng;
use crate::tensor::{BnMode, Scalar, Tape, Tensor, Var};

/// Auxiliary classifier head: `num_conv` x [conv(stride 2) + BN + ReLU],
/// global average pool, then `num_fc` FC layers ending in K logits.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AuxHeadSpec {
    pub num_conv: usize,
    pub num_fc: usize,
    pub conv_channels: usize,
    pub kernel: usize,
    pub conv_stride: usize,
    /// Width of the hidden FC layers (all but the last).
    pub fc_hidden: usize,
}

impl Default for AuxHeadSpec {
    fn default() -> Self {
        Self { num_conv: 2, num_fc: 2, conv_channels: 256, kernel: 3, conv_stride: 2, fc_hidden: 128 }
    }
}

impl AuxHeadSpec {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.num_fc == 0 {
            return Err(NnError::Spec("aux head needs at least one FC layer".into()));
        }
        if self.kernel == 0 || self.conv_stride == 0 || (self.num_conv > 0 && self.conv_channels == 0) {
            return Err(NnError::Spec("aux head conv dimensions must be positive".into()));
        }
        if self.num_fc > 1 && self.fc_hidden == 0 {
            return Err(NnError::Spec("aux head hidden FC width must be positive".into()));
        }
        Ok(())
    }

    fn conv_layers(&self, in_channels: usize) -> Vec<ConvLayerSpec> {
        (0..self.num_conv)
            .map(|i| ConvLayerSpec {
                out_channels: self.conv_channels,
                in_channels: if i == 0 { in_channels } else { self.conv_channels },
                kernel_h: self.kernel,
                kernel_w: self.kernel,
                stride: self.conv_stride,
                padding: self.kernel / 2,
                has_bn: true,
                activation: Activation::Relu,
            })
            .collect()
    }

    fn fc_widths(&self, in_channels: usize, num_classes: usize) -> Vec<usize> {
        let mut w = vec![if self.num_conv > 0 { self.conv_channels } else { in_channels }];
        w.extend(std::iter::repeat_n(self.fc_hidden, self.num_fc - 1));
        w.push(num_classes);
        w
    }

    /// Parameter count of a head on `in_channels` input features.
    pub fn param_count(&self, in_channels: usize, num_classes: usize) -> usize {
        let convs: usize = self.conv_layers(in_channels).iter().map(ConvLayerSpec::param_count).sum();
        let fcs: usize = self.fc_widths(in_channels, num_classes).windows(2).map(|p| p[0] * p[1] + p[1]).sum();
        convs + fcs
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuxHead<T: Scalar> {
    pub spec: AuxHeadSpec,
    pub in_channels: usize,
    pub num_classes: usize,
    pub convs: Vec<Conv<T>>,
    pub fcs: Vec<Linear<T>>,
}

impl<T: Scalar> AuxHead<T> {
    pub fn build(spec: &AuxHeadSpec, in_channels: usize, num_classes: usize, seed: u64) -> Result<Self, NnError> {
        spec.validate()?;
        if in_channels == 0 {
            return Err(NnError::Spec("aux head input channels must be positive".into()));
        }
        let mut rng = rng::rng(seed);
        let convs = spec.conv_layers(in_channels).into_iter().map(|l| Conv::new(l, &mut rng)).collect();
        let fcs =
            spec.fc_widths(in_channels, num_classes).windows(2).map(|p| Linear::new(p[0], p[1], &mut rng)).collect();
        Ok(Self { spec: spec.clone(), in_channels, num_classes, convs, fcs })
    }

    /// Returns the head logits and its parameter leaves.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        feature: Var,
        mode: BnMode,
        grad: GradMode,
    ) -> Result<(Var, Vec<Var>), NnError> {
        let mut ctx = ForwardCtx::default();
        let mut h = feature;
        for conv in &self.convs {
            h = conv.forward(tape, h, mode, grad, &mut ctx)?;
        }
        let logits = fc_stack(&self.fcs, tape, h, grad, &mut ctx)?;
        if mode == BnMode::Train {
            let mut stats = ctx.bn_stats.iter();
            self.convs.iter_mut().for_each(|c| c.apply_stats(&mut stats));
        }
        Ok((logits, ctx.params))
    }

    pub fn predict(&self, feature: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let mut head = self.clone();
        let mut tape = Tape::new();
        let x = tape.leaf_ref(feature);
        let (logits, _) = head.forward(&mut tape, x, BnMode::Eval, GradMode::Frozen)?;
        Ok(tape.value(logits).clone())
    }

    fn visit_all<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&format!("{prefix}.conv{i}"), out);
        }
        for (i, fc) in self.fcs.iter().enumerate() {
            fc.visit(&format!("{prefix}.fc{i}"), out);
        }
    }
}

/// Heads attached to one network, keyed by 1-based unit index.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxHeads<T: Scalar> {
    pub units: Vec<usize>,
    pub heads: Vec<AuxHead<T>>,
}

impl<T: Scalar> AuxHeads<T> {
    pub fn empty() -> Self {
        Self { units: Vec::new(), heads: Vec::new() }
    }

    /// One head per unit in `units`; `channels(u)` gives the feature width there.
    pub fn build(
        spec: &AuxHeadSpec,
        units: &[usize],
        channels: impl Fn(usize) -> Option<usize>,
        num_classes: usize,
        seed: u64,
    ) -> Result<Self, NnError> {
        let heads = units
            .iter()
            .map(|&u| {
                let c = channels(u).ok_or(NnError::TapRange { unit: u, units: 0 })?;
                AuxHead::build(spec, c, num_classes, rng::derive(seed, u as u64))
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { units: units.to_vec(), heads })
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }
}

impl<T: Scalar> Parameterized<T> for AuxHeads<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (u, h) in self.units.iter().zip(&self.heads) {
            h.visit_all(&format!("head{u}"), &mut out);
        }
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (u, h) in self.units.iter().zip(&mut self.heads) {
            for (i, c) in h.convs.iter_mut().enumerate() {
                c.visit_mut(&format!("head{u}.conv{i}"), &mut out);
            }
            for (i, fc) in h.fcs.iter_mut().enumerate() {
                fc.visit_mut(&format!("head{u}.fc{i}"), &mut out);
            }
        }
        out
    }

    fn buffers(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (u, h) in self.units.iter().zip(&self.heads) {
            for (i, c) in h.convs.iter().enumerate() {
                c.visit_buffers(&format!("head{u}.conv{i}"), &mut out);
            }
        }
        out
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (u, h) in self.units.iter().zip(&mut self.heads) {
            for (i, c) in h.convs.iter_mut().enumerate() {
                c.visit_buffers_mut(&format!("head{u}.conv{i}"), &mut out);
            }
        }
        out
    }
}
