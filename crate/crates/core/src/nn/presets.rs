//! Desk-scale architectures.
//!
//! `tiny-t`: three units of two 3x3 conv layers (32/64/128 channels).
//! `tiny-s`: three units of one 3x3 conv layer (16/32/64 channels).
//! Every unit ends with a 2x2 max-pool, so 32x32 inputs give unit features of
//! 16x16, 8x8 and 4x4. Both end in global average pooling and one FC layer.

use super::{ConvLayerSpec, NetworkSpec, PoolSpec, UnitSpec};

const POOL: PoolSpec = PoolSpec { kernel: 2, stride: 2 };

fn stacked(name: &str, in_channels: usize, widths: &[usize], layers_per_unit: usize) -> NetworkSpec {
    let mut c = in_channels;
    let units = widths
        .iter()
        .map(|&w| {
            let layers = (0..layers_per_unit)
                .map(|_| {
                    let l = ConvLayerSpec::same3x3(c, w);
                    c = w;
                    l
                })
                .collect();
            UnitSpec { layers, pool: Some(POOL) }
        })
        .collect();
    NetworkSpec { name: name.to_string(), units, classifier: Default::default() }
}

pub fn tiny_teacher(in_channels: usize) -> NetworkSpec {
    stacked("tiny-t", in_channels, &[32, 64, 128], 2)
}

pub fn tiny_student(in_channels: usize) -> NetworkSpec {
    stacked("tiny-s", in_channels, &[16, 32, 64], 1)
}

pub const NAMES: &[&str] = &["tiny-t", "tiny-s"];

pub fn by_name(name: &str, in_channels: usize) -> Option<NetworkSpec> {
    match name {
        "tiny-t" => Some(tiny_teacher(in_channels)),
        "tiny-s" => Some(tiny_student(in_channels)),
        _ => None,
    }
}
