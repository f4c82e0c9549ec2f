//! Unit-structured convolutional networks with feature tap points.

pub mod layers;
mod network;
pub mod presets;
mod spec;

pub use layers::{GradMode, Parameterized, BN_EPS, BN_MOMENTUM};
pub use network::{compression_percent, FeatureMap, ForwardOutput, Network, Source, Unit};
pub use spec::{Activation, ClassifierSpec, ConvLayerSpec, NetworkSpec, PoolSpec, TaskSpec, UnitSpec, MIN_UNITS};

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("invalid network spec: {0}")]
    Spec(String),
    #[error("tap unit {unit} out of range 1..={units}")]
    TapRange { unit: usize, units: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
