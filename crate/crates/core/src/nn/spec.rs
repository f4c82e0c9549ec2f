use serde::{Deserialize, Serialize};

use super::NnError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

/// One convolution: `weight` is `[out_channels, in_channels, kernel_h, kernel_w]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub has_bn: bool,
    pub activation: Activation,
}

impl ConvLayerSpec {
    /// 3x3, stride 1, "same" padding, batchnorm + ReLU.
    pub fn same3x3(in_channels: usize, out_channels: usize) -> Self {
        Self {
            out_channels,
            in_channels,
            kernel_h: 3,
            kernel_w: 3,
            stride: 1,
            padding: 1,
            has_bn: true,
            activation: Activation::Relu,
        }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel_h, self.kernel_w]
    }

    /// Weights + bias + batchnorm affine.
    pub fn param_count(&self) -> usize {
        let w: usize = self.weight_shape().iter().product();
        w + self.out_channels + if self.has_bn { 2 * self.out_channels } else { 0 }
    }

    fn preserves_size(&self) -> bool {
        self.stride == 1 && 2 * self.padding + 1 == self.kernel_h && 2 * self.padding + 1 == self.kernel_w
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < self.kernel_h || pw < self.kernel_w || self.stride == 0 {
            return None;
        }
        Some(((ph - self.kernel_h) / self.stride + 1, (pw - self.kernel_w) / self.stride + 1))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub kernel: usize,
    pub stride: usize,
}

/// Layers sharing a spatial size, optionally closed by a max-pool.
///
/// The unit's tap point is after its last activation and its pooling.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitSpec {
    pub layers: Vec<ConvLayerSpec>,
    #[serde(default)]
    pub pool: Option<PoolSpec>,
}

/// Global average pool followed by fully connected layers; `hidden` lists the
/// widths before the final K-way layer (empty for a single FC).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    #[serde(default)]
    pub hidden: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    pub units: Vec<UnitSpec>,
    #[serde(default)]
    pub classifier: ClassifierSpec,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub num_classes: usize,
    pub input_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
}

impl TaskSpec {
    pub fn new(num_classes: usize, input: (usize, usize, usize)) -> Self {
        Self { num_classes, input_channels: input.0, input_height: input.1, input_width: input.2 }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.num_classes < 2 {
            return Err(NnError::Spec(format!("num_classes must be at least 2, got {}", self.num_classes)));
        }
        if self.input_channels == 0 || self.input_height == 0 || self.input_width == 0 {
            return Err(NnError::Spec("input dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Minimum number of units; heads go at the end of the first three.
pub const MIN_UNITS: usize = 3;

impl NetworkSpec {
    pub fn num_units(&self) -> usize {
        self.units.len()
    }

    /// Channels leaving the last unit.
    pub fn feature_channels(&self) -> usize {
        self.units.last().and_then(|u| u.layers.last()).map_or(0, |l| l.out_channels)
    }

    pub fn unit_channels(&self, unit_index: usize) -> Option<usize> {
        self.units.get(unit_index.checked_sub(1)?)?.layers.last().map(|l| l.out_channels)
    }

    /// Checks structure and returns the `[C, H, W]` at the end of every unit.
    pub fn validate(&self, task: &TaskSpec) -> Result<Vec<[usize; 3]>, NnError> {
        task.validate()?;
        if self.units.len() < MIN_UNITS {
            return Err(NnError::Spec(format!(
                "{}: {} units, at least {MIN_UNITS} required",
                self.name,
                self.units.len()
            )));
        }
        let (mut c, mut h, mut w) = (task.input_channels, task.input_height, task.input_width);
        let mut shapes = Vec::with_capacity(self.units.len());
        for (ui, unit) in self.units.iter().enumerate() {
            let name = |li: usize| format!("{} unit {} layer {li}", self.name, ui + 1);
            if unit.layers.is_empty() {
                return Err(NnError::Spec(format!("{} unit {} has no layers", self.name, ui + 1)));
            }
            for (li, layer) in unit.layers.iter().enumerate() {
                if layer.out_channels == 0 || layer.in_channels == 0 || layer.kernel_h == 0 || layer.kernel_w == 0 {
                    return Err(NnError::Spec(format!("{}: dimensions must be positive", name(li))));
                }
                if layer.in_channels != c {
                    return Err(NnError::Spec(format!(
                        "{}: expects {} input channels, previous layer gives {c}",
                        name(li),
                        layer.in_channels
                    )));
                }
                let last = li + 1 == unit.layers.len();
                if !layer.preserves_size() && !(last && unit.pool.is_none()) {
                    return Err(NnError::Spec(format!(
                        "{}: only the last layer of a unit without pooling may change spatial size",
                        name(li)
                    )));
                }
                (h, w) = layer
                    .output_hw(h, w)
                    .ok_or_else(|| NnError::Spec(format!("{}: kernel does not fit {h}x{w} input", name(li))))?;
                c = layer.out_channels;
            }
            if let Some(p) = unit.pool {
                if p.kernel == 0 || p.stride == 0 || p.kernel > h || p.kernel > w {
                    return Err(NnError::Spec(format!(
                        "{} unit {}: pool window {} does not fit {h}x{w}",
                        self.name,
                        ui + 1,
                        p.kernel
                    )));
                }
                h = (h - p.kernel) / p.stride + 1;
                w = (w - p.kernel) / p.stride + 1;
            }
            shapes.push([c, h, w]);
        }
        if self.classifier.hidden.contains(&0) {
            return Err(NnError::Spec(format!("{}: classifier widths must be positive", self.name)));
        }
        Ok(shapes)
    }

    /// Parameter count computed from the spec alone.
    pub fn param_count(&self, task: &TaskSpec) -> usize {
        let convs: usize = self.units.iter().flat_map(|u| &u.layers).map(ConvLayerSpec::param_count).sum();
        let mut widths = vec![self.feature_channels()];
        widths.extend(&self.classifier.hidden);
        widths.push(task.num_classes);
        convs + widths.windows(2).map(|p| p[0] * p[1] + p[1]).sum::<usize>()
    }
}
