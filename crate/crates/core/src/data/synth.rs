//! Gaussian mixtures with class means on a scaled unit sphere.

use rand_distr::{Distribution, StandardNormal};

use super::{longtail_sizes, LongTailDataset};
use crate::error::{Error, Result};
use crate::linalg::{norm, Matrix};
use crate::rng;

/// Class means plus isotropic noise. Train and test sets drawn from the same
/// mixture share the means but use independent noise streams.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthMixture {
    means: Matrix,
    within_sigma: f64,
    seed: u64,
}

impl SynthMixture {
    pub fn new(
        num_classes: usize,
        dim: usize,
        class_separation: f64,
        within_sigma: f64,
        seed: u64,
    ) -> Result<Self> {
        if num_classes < 2 || dim < 2 {
            return Err(Error::InvalidInput(format!(
                "need K >= 2 and D >= 2, got K={num_classes}, D={dim}"
            )));
        }
        if !(class_separation.is_finite() && class_separation > 0.0) {
            return Err(Error::InvalidInput(format!(
                "class separation must be positive, got {class_separation}"
            )));
        }
        if !(within_sigma.is_finite() && within_sigma >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "within-class sigma must be non-negative, got {within_sigma}"
            )));
        }
        let mut r = rng::stream(seed, &[rng::TAG_SYNTH, 0]);
        let mut means = Matrix::zeros(num_classes, dim);
        for k in 0..num_classes {
            let row = means.row_mut(k);
            loop {
                row.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut r));
                let n = norm(row);
                if n > 1e-12 {
                    row.iter_mut().for_each(|v| *v *= class_separation / n);
                    break;
                }
            }
        }
        Ok(Self {
            means,
            within_sigma,
            seed,
        })
    }

    pub fn means(&self) -> &Matrix {
        &self.means
    }

    pub fn num_classes(&self) -> usize {
        self.means.rows()
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    /// Draws `sizes[k]` samples of every class from noise stream `stream_id`.
    pub fn sample(&self, sizes: &[usize], stream_id: u64) -> Result<LongTailDataset> {
        let k = self.num_classes();
        if sizes.len() != k {
            return Err(Error::Shape(format!("{} sizes for {k} classes", sizes.len())));
        }
        let d = self.dim();
        let n: usize = sizes.iter().sum();
        let mut data = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for (c, &count) in sizes.iter().enumerate() {
            let mut r = rng::stream(self.seed, &[rng::TAG_SYNTH, 1 + stream_id, c as u64]);
            let mean = self.means.row(c);
            for _ in 0..count {
                for &m in mean {
                    let z: f64 = StandardNormal.sample(&mut r);
                    data.push(m + self.within_sigma * z);
                }
                labels.push(c);
            }
        }
        LongTailDataset::new(
            Matrix::from_vec(n, d, data)?,
            labels,
            k,
            format!(
                "synth(K={k}, D={d}, sigma={}, seed={}, stream={stream_id})",
                self.within_sigma, self.seed
            ),
        )
    }

    pub fn train_set(&self, n_max: usize, imbalance: f64) -> Result<LongTailDataset> {
        self.sample(&longtail_sizes(self.num_classes(), n_max, imbalance)?, 0)
    }

    /// Class-balanced held-out set.
    pub fn test_set(&self, per_class: usize) -> Result<LongTailDataset> {
        self.sample(&vec![per_class; self.num_classes()], 1)
    }
}

/// Long-tail training set drawn from a fresh [`SynthMixture`].
pub fn synth_mixture(
    num_classes: usize,
    dim: usize,
    n_max: usize,
    imbalance: f64,
    class_separation: f64,
    within_sigma: f64,
    seed: u64,
) -> Result<LongTailDataset> {
    SynthMixture::new(num_classes, dim, class_separation, within_sigma, seed)?.train_set(n_max, imbalance)
}
