//! Random view generation.
//!
//! Two policies: additive noise plus coordinate dropout for generic feature
//! vectors, and a reduced image policy (flip, reflect-pad crop, pixel noise)
//! for standardized CIFAR rows.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::cifar::{ChannelNorm, CIFAR10_NORM, CIFAR_PIXELS, CIFAR_SIDE};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AugmentMode {
    EmbeddingNoise { noise_sigma: f64, dropout_prob: f64 },
    Pixel {
        flip_prob: f64,
        crop_padding: usize,
        pixel_noise_sigma: f64,
        norm: ChannelNorm,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentationPolicy {
    mode: AugmentMode,
}

impl AugmentationPolicy {
    pub fn embedding_noise(noise_sigma: f64, dropout_prob: f64) -> Result<Self> {
        if !(noise_sigma.is_finite() && noise_sigma >= 0.0) {
            return Err(Error::Config(format!("noise_sigma must be >= 0, got {noise_sigma}")));
        }
        if !(0.0..1.0).contains(&dropout_prob) {
            return Err(Error::Config(format!("dropout_prob must lie in [0, 1), got {dropout_prob}")));
        }
        Ok(Self {
            mode: AugmentMode::EmbeddingNoise { noise_sigma, dropout_prob },
        })
    }

    pub fn pixel(flip_prob: f64, crop_padding: usize, pixel_noise_sigma: f64) -> Result<Self> {
        Self::pixel_with_norm(flip_prob, crop_padding, pixel_noise_sigma, CIFAR10_NORM)
    }

    pub fn pixel_with_norm(
        flip_prob: f64,
        crop_padding: usize,
        pixel_noise_sigma: f64,
        norm: ChannelNorm,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&flip_prob) {
            return Err(Error::Config(format!("flip_prob must lie in [0, 1], got {flip_prob}")));
        }
        if crop_padding >= CIFAR_SIDE {
            return Err(Error::Config(format!("crop_padding must be below {CIFAR_SIDE}")));
        }
        if !(pixel_noise_sigma.is_finite() && pixel_noise_sigma >= 0.0) {
            return Err(Error::Config(format!(
                "pixel_noise_sigma must be >= 0, got {pixel_noise_sigma}"
            )));
        }
        Ok(Self {
            mode: AugmentMode::Pixel {
                flip_prob,
                crop_padding,
                pixel_noise_sigma,
                norm,
            },
        })
    }

    pub fn mode(&self) -> &AugmentMode {
        &self.mode
    }

    pub fn is_pixel(&self) -> bool {
        matches!(self.mode, AugmentMode::Pixel { .. })
    }
}

/// Draws one augmented view of `x`. The output depends only on `x`, the
/// policy and the state of `rng`.
pub fn augment(policy: &AugmentationPolicy, x: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
    match policy.mode {
        AugmentMode::EmbeddingNoise { noise_sigma, dropout_prob } => {
            let mut out = x.to_vec();
            if noise_sigma > 0.0 {
                for v in &mut out {
                    let z: f64 = StandardNormal.sample(rng);
                    *v += noise_sigma * z;
                }
            }
            if dropout_prob > 0.0 {
                for v in &mut out {
                    if rng.random::<f64>() < dropout_prob {
                        *v = 0.0;
                    }
                }
            }
            Ok(out)
        }
        AugmentMode::Pixel {
            flip_prob,
            crop_padding,
            pixel_noise_sigma,
            norm,
        } => {
            if x.len() != CIFAR_PIXELS {
                return Err(Error::Shape(format!(
                    "pixel augmentation needs {CIFAR_PIXELS} features, got {}",
                    x.len()
                )));
            }
            let plane = CIFAR_SIDE * CIFAR_SIDE;
            let mut img: Vec<f64> = x.iter().enumerate().map(|(p, &z)| norm.restore(p / plane, z)).collect();
            if rng.random::<f64>() < flip_prob {
                img = hflip(&img);
            }
            if crop_padding > 0 {
                let dy = rng.random_range(0..=2 * crop_padding);
                let dx = rng.random_range(0..=2 * crop_padding);
                img = pad_crop(&img, crop_padding, dy, dx);
            }
            for (p, v) in img.iter_mut().enumerate() {
                if pixel_noise_sigma > 0.0 {
                    let z: f64 = StandardNormal.sample(rng);
                    *v += pixel_noise_sigma * z;
                }
                *v = norm.standardize(p / plane, v.clamp(0.0, 1.0));
            }
            Ok(img)
        }
    }
}

/// Mirrors every row of every channel plane.
pub fn hflip(img: &[f64]) -> Vec<f64> {
    let mut out = img.to_vec();
    for row in out.chunks_exact_mut(CIFAR_SIDE) {
        row.reverse();
    }
    out
}

fn reflect(c: isize) -> usize {
    let n = CIFAR_SIDE as isize;
    let r = if c < 0 {
        -c
    } else if c >= n {
        2 * (n - 1) - c
    } else {
        c
    };
    r as usize
}

/// Reflect-pads each plane by `pad` and crops the 32x32 window whose top-left
/// corner sits at `(dy, dx)` in padded coordinates. `(pad, pad)` is the
/// identity crop.
pub fn pad_crop(img: &[f64], pad: usize, dy: usize, dx: usize) -> Vec<f64> {
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut out = vec![0.0; img.len()];
    for c in 0..img.len() / plane {
        for y in 0..CIFAR_SIDE {
            let sy = reflect(y as isize + dy as isize - pad as isize);
            for x in 0..CIFAR_SIDE {
                let sx = reflect(x as isize + dx as isize - pad as isize);
                out[c * plane + y * CIFAR_SIDE + x] = img[c * plane + sy * CIFAR_SIDE + sx];
            }
        }
    }
    out
}
