use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::diffmath::Tensor;
use crate::error::{Error, Result};

/// Per-patch boolean mask; `true` means the patch is replaced by the mask token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchMask {
    masked: Vec<bool>,
}

impl PatchMask {
    pub fn from_bools(masked: Vec<bool>) -> Self {
        PatchMask { masked }
    }

    pub fn none(num_patches: usize) -> Self {
        PatchMask {
            masked: vec![false; num_patches],
        }
    }

    /// Masks exactly `round(ratio * num_patches)` patches chosen without
    /// replacement. The draw depends only on `(seed, step)`.
    pub fn sample(num_patches: usize, ratio: f64, seed: u64, step: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&ratio) {
            return Err(Error::InvalidArgument(format!(
                "mask ratio {ratio} outside [0, 1)"
            )));
        }
        let count = (ratio * num_patches as f64).round() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(step);
        let mut masked = vec![false; num_patches];
        for i in index::sample(&mut rng, num_patches, count) {
            masked[i] = true;
        }
        Ok(PatchMask { masked })
    }

    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn is_masked(&self, patch: usize) -> bool {
        self.masked[patch]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.masked
    }

    pub fn count(&self) -> usize {
        self.masked.iter().filter(|m| **m).count()
    }

    pub fn ratio_actual(&self) -> f64 {
        if self.masked.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.masked.len() as f64
        }
    }

    /// Expands to a `[C, H, W]` tensor of 0/1 at pixel resolution.
    pub fn pixel_mask(&self, cfg: &ModelConfig) -> Result<Tensor> {
        if self.masked.len() != cfg.num_patches() {
            return Err(Error::shape(
                "pixel_mask",
                format!(
                    "{} patches for a {}-patch model",
                    self.masked.len(),
                    cfg.num_patches()
                ),
            ));
        }
        let (s, p, g) = (cfg.image_size, cfg.patch_size, cfg.grid());
        let mut data = vec![0.0; cfg.channels * s * s];
        for c in 0..cfg.channels {
            for y in 0..s {
                for x in 0..s {
                    if self.masked[(y / p) * g + x / p] {
                        data[(c * s + y) * s + x] = 1.0;
                    }
                }
            }
        }
        Tensor::new(&cfg.image_shape(), data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn deterministic_in_seed_and_step() {
        let a = PatchMask::sample(64, 0.4, 7, 3).unwrap();
        let b = PatchMask::sample(64, 0.4, 7, 3).unwrap();
        let c = PatchMask::sample(64, 0.4, 7, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn zero_ratio_masks_nothing() {
        assert_eq!(PatchMask::sample(16, 0.0, 1, 1).unwrap().count(), 0);
        assert!(PatchMask::sample(16, 1.0, 1, 1).is_err());
    }

    proptest! {
        #[test]
        fn ratio_within_one_patch(n in 1usize..200, ratio in 0.0f64..0.999, seed: u64, step: u64) {
            let m = PatchMask::sample(n, ratio, seed, step).unwrap();
            prop_assert_eq!(m.count(), (ratio * n as f64).round() as usize);
            prop_assert!((m.ratio_actual() - ratio).abs() <= 1.0 / n as f64);
        }
    }
}
