//! Auxiliary classifier heads and the distillation loss stack.

mod head;
mod loss;

pub use head::{AuxHead, AuxHeadSpec, AuxHeads};
pub(crate) use loss::batch_accuracy;
pub use loss::{
    cross_entropy_loss, kd_loss, kl_div_loss, mhkd_loss, ohkd_loss, softmax_t, teacher_head_loss, DistillConfig,
    HeadLoss, LossReport, MhkdLoss, OhkdParts,
};

use thiserror::Error;

use crate::nn::NnError;
use crate::tensor::TensorError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistillError {
    #[error("distillation config: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
