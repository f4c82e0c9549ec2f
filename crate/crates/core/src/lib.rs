//! Multi-head knowledge distillation on a small CPU autodiff engine.
//!
//! Layers: [`tensor`] (dense tensors, reverse-mode tape), [`nn`] (unit-structured
//! CNNs with tap points), [`distill`] (auxiliary heads and the distillation
//! losses), [`data`] (CIFAR binaries, synthetic data, augmentation) and
//! [`train`] (SGD, teacher and student procedures). Configs, checkpoints and
//! reports live in the `mhkd-cli` crate.

pub mod data;
pub mod distill;
pub mod exec;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;
