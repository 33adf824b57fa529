//! Long-tail datasets: construction, ingestion, augmentation and the
//! head/mid/tail class partition used in evaluation.

mod augment;
mod cifar;
mod synth;

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng;

pub use augment::{augment, hflip, pad_crop, AugmentationPolicy, AugmentMode};
pub use cifar::{
    load_cifar100_bin, load_cifar10_bin, parse_cifar100, parse_cifar10, serialize_cifar10, ChannelNorm,
    CIFAR100_NORM, CIFAR10_NORM, CIFAR_PIXELS, CIFAR_SIDE,
};
pub use synth::{synth_mixture, SynthMixture};

#[derive(Debug, Clone, PartialEq)]
pub struct LongTailDataset {
    features: Matrix,
    labels: Vec<usize>,
    class_sizes: Vec<usize>,
    provenance: String,
}

impl LongTailDataset {
    /// Builds a dataset over `num_classes` classes. Class sizes are taken
    /// from the label histogram, which must be non-increasing in class id.
    pub fn new(
        features: Matrix,
        labels: Vec<usize>,
        num_classes: usize,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows for {} labels",
                features.rows(),
                labels.len()
            )));
        }
        let class_sizes = histogram(&labels, num_classes)?;
        if let Some(k) = (1..num_classes).find(|&k| class_sizes[k] > class_sizes[k - 1]) {
            return Err(Error::InvalidInput(format!(
                "class sizes must be non-increasing, class {k} has {} > {}",
                class_sizes[k],
                class_sizes[k - 1]
            )));
        }
        Ok(Self {
            features,
            labels,
            class_sizes,
            provenance: provenance.into(),
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_sizes(&self) -> &[usize] {
        &self.class_sizes
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn num_classes(&self) -> usize {
        self.class_sizes.len()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Largest over smallest class size; infinite when a class is empty.
    pub fn imbalance_ratio(&self) -> f64 {
        let first = *self.class_sizes.first().unwrap_or(&0) as f64;
        let last = *self.class_sizes.last().unwrap_or(&0) as f64;
        first / last
    }

    /// Relabels classes so that original class `perm[k]` becomes class `k`.
    /// Intended for balanced inputs, where any permutation keeps the
    /// non-increasing size order.
    pub fn permute_classes(&self, seed: u64) -> Result<Self> {
        let k = self.num_classes();
        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(&mut rng::stream(seed, &[rng::TAG_PERMUTE]));
        let mut inverse = vec![0; k];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        let labels = self.labels.iter().map(|&l| inverse[l]).collect();
        Self::new(
            self.features.clone(),
            labels,
            k,
            format!("{} permuted(seed={seed})", self.provenance),
        )
    }
}

fn histogram(labels: &[usize], num_classes: usize) -> Result<Vec<usize>> {
    let mut h = vec![0; num_classes];
    for (i, &l) in labels.iter().enumerate() {
        *h.get_mut(l).ok_or_else(|| {
            Error::InvalidInput(format!("label {l} of sample {i} is outside 0..{num_classes}"))
        })? += 1;
    }
    Ok(h)
}

/// Exponentially decaying class sizes `round(n_max * imb^(-k/(K-1)))`, with
/// half-up rounding and a floor of one sample.
pub fn longtail_sizes(num_classes: usize, n_max: usize, imbalance: f64) -> Result<Vec<usize>> {
    if num_classes < 2 {
        return Err(Error::InvalidInput("need at least two classes".into()));
    }
    if n_max < 1 {
        return Err(Error::InvalidInput("largest class must hold at least one sample".into()));
    }
    if !(imbalance.is_finite() && imbalance >= 1.0) {
        return Err(Error::InvalidInput(format!("imbalance ratio must be >= 1, got {imbalance}")));
    }
    let last = (num_classes - 1) as f64;
    Ok((0..num_classes)
        .map(|k| {
            let exact = n_max as f64 * imbalance.powf(-(k as f64) / last);
            ((exact + 0.5).floor() as usize).max(1)
        })
        .collect())
}

/// Keeps `sizes[k]` samples of every class `k`, chosen by a seed-keyed
/// shuffle of that class. Retained samples stay in their original order.
pub fn subsample_longtail(
    balanced: &LongTailDataset,
    sizes: &[usize],
    seed: u64,
) -> Result<LongTailDataset> {
    let k = balanced.num_classes();
    if sizes.len() != k {
        return Err(Error::Shape(format!("{} sizes for {k} classes", sizes.len())));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in balanced.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut keep = Vec::with_capacity(sizes.iter().sum());
    for (c, members) in by_class.iter_mut().enumerate() {
        if sizes[c] > members.len() {
            return Err(Error::InvalidInput(format!(
                "class {c} has {} samples, {} requested",
                members.len(),
                sizes[c]
            )));
        }
        members.shuffle(&mut rng::stream(seed, &[rng::TAG_SUBSAMPLE, c as u64]));
        keep.extend_from_slice(&members[..sizes[c]]);
    }
    keep.sort_unstable();
    let labels = keep.iter().map(|&i| balanced.labels[i]).collect();
    LongTailDataset::new(
        balanced.features.select_rows(&keep),
        labels,
        k,
        format!("{} longtail(seed={seed})", balanced.provenance),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Group {
    Head,
    Mid,
    Tail,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Head, Group::Mid, Group::Tail];

    pub fn name(self) -> &'static str {
        match self {
            Group::Head => "head",
            Group::Mid => "mid",
            Group::Tail => "tail",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupPartition {
    pub head: BTreeSet<usize>,
    pub mid: BTreeSet<usize>,
    pub tail: BTreeSet<usize>,
}

impl GroupPartition {
    pub fn group_of(&self, class: usize) -> Option<Group> {
        if self.head.contains(&class) {
            Some(Group::Head)
        } else if self.mid.contains(&class) {
            Some(Group::Mid)
        } else if self.tail.contains(&class) {
            Some(Group::Tail)
        } else {
            None
        }
    }

    pub fn members(&self, group: Group) -> &BTreeSet<usize> {
        match group {
            Group::Head => &self.head,
            Group::Mid => &self.mid,
            Group::Tail => &self.tail,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.head.len() + self.mid.len() + self.tail.len()
    }
}

/// Splits classes by descending size (ties by class id): mid and tail get
/// `floor(K/3)` classes each and head takes the rest, which gives 4/3/3 for
/// ten classes and 34/33/33 for a hundred.
pub fn head_mid_tail_split(class_sizes: &[usize]) -> Result<GroupPartition> {
    let k = class_sizes.len();
    if k < 3 {
        return Err(Error::InvalidInput(format!("need at least 3 classes, got {k}")));
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| class_sizes[b].cmp(&class_sizes[a]).then(a.cmp(&b)));
    let third = k / 3;
    let n_head = k - 2 * third;
    Ok(GroupPartition {
        head: order[..n_head].iter().copied().collect(),
        mid: order[n_head..n_head + third].iter().copied().collect(),
        tail: order[n_head + third..].iter().copied().collect(),
    })
}

const TCLD_MAGIC: &[u8; 4] = b"TCLD";

/// Writes the flat binary dataset format: `TCLD`, `u32 K`, `u32 D`, `u32 n`,
/// then per sample a `u16` label and `D` `f32` features, all little-endian.
pub fn write_tcld(dataset: &LongTailDataset, mut w: impl Write) -> std::io::Result<()> {
    let k = dataset.num_classes();
    if k > u16::MAX as usize + 1 {
        return Err(std::io::Error::other("too many classes for a u16 label"));
    }
    w.write_all(TCLD_MAGIC)?;
    for v in [k, dataset.dim(), dataset.len()] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    for (row, &l) in dataset.features.row_iter().zip(&dataset.labels) {
        w.write_all(&(l as u16).to_le_bytes())?;
        for &x in row {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_tcld(mut r: impl Read) -> Result<LongTailDataset> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::Parse { offset: 0, msg: e.to_string() })?;
    parse_tcld(&bytes)
}

pub fn parse_tcld(bytes: &[u8]) -> Result<LongTailDataset> {
    if bytes.len() < 16 || &bytes[..4] != TCLD_MAGIC {
        return Err(Error::Parse { offset: 0, msg: "missing TCLD header".into() });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let (k, d, n) = (u32_at(4), u32_at(8), u32_at(12));
    let record = 2 + 4 * d;
    let expected = 16 + n * record;
    if bytes.len() != expected {
        return Err(Error::Parse {
            offset: bytes.len().min(expected),
            msg: format!("expected {expected} bytes for {n} records of width {d}, found {}", bytes.len()),
        });
    }
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * d);
    for i in 0..n {
        let o = 16 + i * record;
        let l = u16::from_le_bytes([bytes[o], bytes[o + 1]]) as usize;
        if l >= k {
            return Err(Error::Parse { offset: o, msg: format!("label {l} outside 0..{k}") });
        }
        labels.push(l);
        for j in 0..d {
            let p = o + 2 + 4 * j;
            data.push(f32::from_le_bytes(bytes[p..p + 4].try_into().unwrap()) as f64);
        }
    }
    LongTailDataset::new(Matrix::from_vec(n, d, data)?, labels, k, "tcld")
}

pub fn save_tcld(dataset: &LongTailDataset, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    write_tcld(dataset, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_tcld(path: &Path) -> Result<LongTailDataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut ds = parse_tcld(&bytes)?;
    ds.provenance = format!("tcld:{}", path.display());
    Ok(ds)
}
