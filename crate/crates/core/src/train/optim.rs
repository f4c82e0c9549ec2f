use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::nn::Parameterized;
use crate::tensor::{Scalar, Tensor};

/// SGD with momentum and a step schedule. Momentum, weight decay and gamma
/// may be omitted in config files and default to 0.9, 5e-4 and 0.1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    pub lr_milestones: Vec<usize>,
    #[serde(default = "default_gamma")]
    pub lr_gamma: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_weight_decay() -> f64 {
    5e-4
}

fn default_gamma() -> f64 {
    0.1
}

impl Default for OptimConfig {
    /// Desk-scale schedule: 30 epochs, steps at 15/22/27.
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_milestones: vec![15, 22, 27],
            lr_gamma: 0.1,
            epochs: 30,
            batch_size: 64,
        }
    }
}

impl OptimConfig {
    /// 240 epochs, steps at 150/180/210.
    pub fn full_cifar100() -> Self {
        Self { lr_milestones: vec![150, 180, 210], epochs: 240, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma <= 1.0) {
            return bad(format!("lr_gamma must lie in (0, 1], got {}", self.lr_gamma));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if self.lr_milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("lr_milestones must be strictly increasing, got {:?}", self.lr_milestones));
        }
        if self.lr_milestones.last().is_some_and(|&m| m >= self.epochs) {
            return bad(format!("lr_milestones {:?} must be below epochs = {}", self.lr_milestones, self.epochs));
        }
        Ok(())
    }
}

/// `lr * gamma^(number of milestones <= epoch)`.
pub fn lr_at(cfg: &OptimConfig, epoch: usize) -> f64 {
    let passed = cfg.lr_milestones.iter().filter(|&&m| m <= epoch).count();
    cfg.lr * cfg.lr_gamma.powi(passed as i32)
}

/// `v <- momentum * v + grad + weight_decay * param; param <- param - lr * v`.
pub fn sgd_step<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &[T],
    velocity: &mut [T],
    momentum: f64,
    weight_decay: f64,
    lr: f64,
) -> Result<(), TrainError> {
    if grad.len() != param.numel() || velocity.len() != param.numel() {
        return Err(TrainError::Contract(format!(
            "sgd_step: param has {} elements, grad {}, velocity {}",
            param.numel(),
            grad.len(),
            velocity.len()
        )));
    }
    let (mu, wd, lr) = (T::from_f64(momentum), T::from_f64(weight_decay), T::from_f64(lr));
    for ((p, &g), v) in param.data_mut().iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = mu * *v + g + wd * *p;
        *p -= lr * *v;
    }
    Ok(())
}

/// Decay applies to conv and FC weights only, not to biases or batchnorm affine.
pub fn decays(name: &str) -> bool {
    name.ends_with(".weight")
}

/// Momentum SGD over one parameter group, with velocities kept in
/// `params()` order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sgd<T: Scalar> {
    pub velocities: Vec<(String, Vec<T>)>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new() -> Self {
        Self { velocities: Vec::new() }
    }

    /// Applies one update from each parameter's accumulated `grad`, then zeroes it.
    pub fn step<M: Parameterized<T> + ?Sized>(
        &mut self,
        module: &mut M,
        cfg: &OptimConfig,
        lr: f64,
    ) -> Result<(), TrainError> {
        let params = module.params_mut();
        if self.velocities.is_empty() {
            self.velocities = params.iter().map(|(n, p)| (n.clone(), vec![T::ZERO; p.numel()])).collect();
        }
        if self.velocities.len() != params.len() {
            return Err(TrainError::Contract("optimizer state does not match parameter list".into()));
        }
        for ((name, p), (_, v)) in params.into_iter().zip(&mut self.velocities) {
            let grad = p.grad.take().unwrap_or_else(|| vec![T::ZERO; p.numel()]);
            let wd = if decays(&name) { cfg.weight_decay } else { 0.0 };
            sgd_step(p, &grad, v, cfg.momentum, wd, lr)?;
        }
        Ok(())
    }
}
