use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::LabeledBatch;
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Zero-pad, random crop, random horizontal flip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentPolicy {
    pub pad: usize,
    pub crop: usize,
    pub hflip_prob: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self { pad: 4, crop: 32, hflip_prob: 0.5 }
    }
}

/// Mirrors every row of a `[C, H, W]` image.
pub fn hflip_in_place<T: Scalar>(image: &mut [T], width: usize) {
    image.chunks_mut(width).for_each(|row| row.reverse());
}

/// Augments each image independently. Padding is zero in normalized space;
/// draws per image are (row offset, column offset, flip).
pub fn augment<T: Scalar>(batch: &LabeledBatch<T>, rng: &mut Rng, policy: &AugmentPolicy) -> LabeledBatch<T> {
    let s = batch.images.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let crop = policy.crop;
    let (ph, pw) = (h + 2 * policy.pad, w + 2 * policy.pad);
    assert!(crop <= ph && crop <= pw, "crop {crop} larger than padded image {ph}x{pw}");
    let mut out = Vec::with_capacity(b * c * crop * crop);
    let src = batch.images.data();
    for img in src.chunks(c * h * w) {
        let dy = rng.random_range(0..=ph - crop);
        let dx = rng.random_range(0..=pw - crop);
        let flip = rng.random::<f64>() < policy.hflip_prob;
        let start = out.len();
        for ch in 0..c {
            let plane = &img[ch * h * w..(ch + 1) * h * w];
            for y in 0..crop {
                let sy = (y + dy) as isize - policy.pad as isize;
                for x in 0..crop {
                    let sx = (x + dx) as isize - policy.pad as isize;
                    let inside = sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w;
                    out.push(if inside { plane[sy as usize * w + sx as usize] } else { T::ZERO });
                }
            }
        }
        if flip {
            hflip_in_place(&mut out[start..], crop);
        }
    }
    LabeledBatch {
        images: Tensor::new(&[b, c, crop, crop], out).expect("augmented shape"),
        labels: batch.labels.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn batch() -> LabeledBatch<f32> {
        let data = (0..2 * 3 * 32 * 32).map(|i| ((i * 31 % 97) as f32 - 48.0) / 10.0).collect();
        LabeledBatch { images: Tensor::new(&[2, 3, 32, 32], data).unwrap(), labels: vec![4, 1] }
    }

    #[test]
    fn no_pad_no_flip_is_identity() {
        let b = batch();
        let p = AugmentPolicy { pad: 0, crop: 32, hflip_prob: 0.0 };
        assert_eq!(augment(&b, &mut rng::rng(3), &p), b);
    }

    #[test]
    fn forced_flip_is_an_involution() {
        let b = batch();
        let p = AugmentPolicy { pad: 0, crop: 32, hflip_prob: 1.0 };
        let once = augment(&b, &mut rng::rng(3), &p);
        assert_ne!(once, b);
        assert_eq!(augment(&once, &mut rng::rng(4), &p), b);
    }

    #[test]
    fn deterministic_and_label_preserving() {
        let b = batch();
        let p = AugmentPolicy::default();
        let a1 = augment(&b, &mut rng::rng(9), &p);
        let a2 = augment(&b, &mut rng::rng(9), &p);
        assert_eq!(a1, a2);
        assert_eq!(a1.labels, b.labels);
        let (lo, hi) = b.images.data().iter().fold((0.0f32, 0.0f32), |(l, h), &v| (l.min(v), h.max(v)));
        assert!(a1.images.data().iter().all(|&v| v >= lo && v <= hi));
    }
}
