//! CIFAR-10 / CIFAR-100 binary batches.
//!
//! A CIFAR-10 record is one label byte followed by 3072 pixel bytes: the red,
//! green and blue 32x32 planes in that order, each row-major. CIFAR-100
//! records carry a coarse and a fine label byte before the pixels; the fine
//! label is used.

use std::path::Path;

use super::LongTailDataset;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;
const PLANE: usize = CIFAR_SIDE * CIFAR_SIDE;

/// Per-channel mean and standard deviation of `[0, 1]`-scaled pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelNorm {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

pub const CIFAR10_NORM: ChannelNorm = ChannelNorm {
    mean: [0.4914, 0.4822, 0.4465],
    std: [0.2470, 0.2435, 0.2616],
};

pub const CIFAR100_NORM: ChannelNorm = ChannelNorm {
    mean: [0.5071, 0.4865, 0.4409],
    std: [0.2673, 0.2564, 0.2762],
};

impl ChannelNorm {
    #[inline]
    pub fn standardize(&self, channel: usize, x: f64) -> f64 {
        (x - self.mean[channel]) / self.std[channel]
    }

    #[inline]
    pub fn restore(&self, channel: usize, z: f64) -> f64 {
        z * self.std[channel] + self.mean[channel]
    }

    fn describe(&self) -> String {
        format!("mean={:?} std={:?}", self.mean, self.std)
    }
}

fn parse(
    bytes: &[u8],
    label_bytes: usize,
    num_classes: usize,
    norm: &ChannelNorm,
    tag: &str,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let record = label_bytes + CIFAR_PIXELS;
    if bytes.len() % record != 0 {
        return Err(Error::Parse {
            offset: bytes.len() - bytes.len() % record,
            msg: format!("{tag}: length {} not a multiple of {record}", bytes.len()),
        });
    }
    let n = bytes.len() / record;
    let mut data = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(record).enumerate() {
        let offset = i * record + label_bytes - 1;
        let label = rec[label_bytes - 1] as usize;
        if label >= num_classes {
            return Err(Error::Parse {
                offset,
                msg: format!("{tag}: label {label} outside 0..{num_classes}"),
            });
        }
        labels.push(label);
        for (p, &px) in rec[label_bytes..].iter().enumerate() {
            data.push(norm.standardize(p / PLANE, px as f64 / 255.0));
        }
    }
    Ok((data, labels))
}

/// Parses CIFAR-10 batch bytes into a dataset with standardized pixels.
///
/// Class sizes must come out non-increasing, which holds for the balanced
/// official batches; long-tail subsets are derived afterwards.
pub fn parse_cifar10(bytes: &[u8]) -> Result<LongTailDataset> {
    let (data, labels) = parse(bytes, 1, 10, &CIFAR10_NORM, "cifar10")?;
    finish(data, labels, 10, format!("cifar10 {}", CIFAR10_NORM.describe()))
}

pub fn parse_cifar100(bytes: &[u8]) -> Result<LongTailDataset> {
    let (data, labels) = parse(bytes, 2, 100, &CIFAR100_NORM, "cifar100")?;
    finish(data, labels, 100, format!("cifar100 {}", CIFAR100_NORM.describe()))
}

fn finish(data: Vec<f64>, labels: Vec<usize>, k: usize, provenance: String) -> Result<LongTailDataset> {
    let n = labels.len();
    LongTailDataset::new(Matrix::from_vec(n, CIFAR_PIXELS, data)?, labels, k, provenance)
}

/// Reads and concatenates CIFAR-10 batch files.
pub fn load_cifar10_bin<P: AsRef<Path>>(paths: &[P]) -> Result<LongTailDataset> {
    let mut bytes = Vec::new();
    for p in paths {
        let p = p.as_ref();
        let chunk = std::fs::read(p).map_err(|e| Error::io(p, e))?;
        if chunk.len() % (1 + CIFAR_PIXELS) != 0 {
            return Err(Error::Parse {
                offset: chunk.len() - chunk.len() % (1 + CIFAR_PIXELS),
                msg: format!("{}: length {} not a multiple of {}", p.display(), chunk.len(), 1 + CIFAR_PIXELS),
            });
        }
        bytes.extend_from_slice(&chunk);
    }
    parse_cifar10(&bytes)
}

pub fn load_cifar100_bin(path: &Path) -> Result<LongTailDataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar100(&bytes)
}

/// Inverse of [`parse_cifar10`]: undoes standardization and scaling and
/// writes 3073-byte records.
pub fn serialize_cifar10(dataset: &LongTailDataset) -> Result<Vec<u8>> {
    if dataset.dim() != CIFAR_PIXELS {
        return Err(Error::Shape(format!("expected {CIFAR_PIXELS} features, got {}", dataset.dim())));
    }
    let mut out = Vec::with_capacity(dataset.len() * (1 + CIFAR_PIXELS));
    for (row, &label) in dataset.features().row_iter().zip(dataset.labels()) {
        out.push(u8::try_from(label).map_err(|_| Error::InvalidInput(format!("label {label} too large")))?);
        for (p, &z) in row.iter().enumerate() {
            let v = (CIFAR10_NORM.restore(p / PLANE, z) * 255.0).round().clamp(0.0, 255.0);
            out.push(v as u8);
        }
    }
    Ok(out)
}
