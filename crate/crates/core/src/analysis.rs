//! Embedding-space diagnostics: sphere coverage, negative-contribution
//! curves, positive-pair factors and PCA.

use std::fmt::Write as _;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, symmetric_eigen, Matrix};
use crate::loss::{check_unit_rows, SimilarityMatrix, TauVector};
use crate::rng;

pub const DEFAULT_BINS: usize = 500;
pub const CURVE_BINS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageHistogram {
    pub bin_directions: Matrix,
    pub counts: Vec<usize>,
    pub seed: u64,
}

/// Random unit directions, one per row, drawn from normalized Gaussians.
pub fn random_directions(bins: usize, dim: usize, seed: u64) -> Matrix {
    let mut r = rng::stream(seed, &[rng::TAG_COVERAGE, dim as u64]);
    let mut m = Matrix::zeros(bins, dim);
    for b in 0..bins {
        loop {
            let row: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut r)).collect();
            let n = norm(&row);
            if n > 0.0 {
                m.row_mut(b).iter_mut().zip(&row).for_each(|(d, v)| *d = v / n);
                break;
            }
        }
    }
    m
}

/// Assigns every embedding to the bin direction of maximum cosine, ties to
/// the lowest bin index.
pub fn coverage_histogram(embeddings: &Matrix, bins: usize, seed: u64) -> Result<CoverageHistogram> {
    if embeddings.rows() == 0 {
        return Err(Error::InvalidInput("no embeddings to bin".into()));
    }
    if bins == 0 {
        return Err(Error::InvalidInput("need at least one bin".into()));
    }
    check_unit_rows(embeddings)?;
    let dirs = random_directions(bins, embeddings.cols(), seed);
    let mut counts = vec![0usize; bins];
    for e in embeddings.row_iter() {
        let mut best = (0, f64::NEG_INFINITY);
        for (b, d) in dirs.row_iter().enumerate() {
            let s = dot(e, d);
            if s > best.1 {
                best = (b, s);
            }
        }
        counts[best.0] += 1;
    }
    Ok(CoverageHistogram { bin_directions: dirs, counts, seed })
}

/// Coefficient of variation (population standard deviation over mean) of
/// the bin counts.
pub fn uniformity_stat(h: &CoverageHistogram) -> f64 {
    let b = h.counts.len() as f64;
    let mean = h.counts.iter().sum::<usize>() as f64 / b;
    if mean == 0.0 {
        return 0.0;
    }
    let var = h.counts.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / b;
    var.sqrt() / mean
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContributionCurves {
    /// 101 edges from -1 to 1 in steps of 0.02.
    pub bin_edges: Vec<f64>,
    pub individual: Vec<f64>,
    pub cumulative: Vec<f64>,
    pub histogram: Vec<f64>,
}

impl ContributionCurves {
    pub fn bin_center(b: usize) -> f64 {
        (2 * b as i64 - 99) as f64 / 100.0
    }

    pub fn argmax_cumulative(&self) -> usize {
        argmax(&self.cumulative)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CurveAggregation {
    /// All negatives of all anchors in one histogram.
    #[default]
    Pooled,
    /// Per-anchor curves averaged, then renormalized.
    MeanOverAnchors,
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

pub fn bin_edges() -> Vec<f64> {
    (0..=CURVE_BINS).map(|b| (b as f64 - 50.0) / 50.0).collect()
}

/// Index of the 0.02-wide bin holding `s`; `s = 1` falls in the last bin.
pub fn curve_bin(s: f64) -> usize {
    (((s + 1.0) * 50.0).floor().max(0.0) as usize).min(CURVE_BINS - 1)
}

fn normalize_max(v: &mut [f64]) {
    let m = v.iter().copied().fold(0.0f64, f64::max);
    if m > 0.0 {
        v.iter_mut().for_each(|x| *x /= m);
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau.is_finite() && tau > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("temperature must be positive, got {tau}")))
    }
}

fn check_sims(sims: &[f64]) -> Result<()> {
    match sims.iter().find(|s| !(s.is_finite() && s.abs() <= 1.0 + crate::loss::COSINE_SLACK)) {
        Some(s) => Err(Error::InvalidInput(format!("similarity {s} outside [-1, 1]"))),
        None => Ok(()),
    }
}

/// Raw (unnormalized) per-bin counts and contribution sums. Weights are
/// `exp((s - s_max)/τ)`, a constant multiple of `exp((s - 1)/τ)`, so the
/// largest one is exactly 1 and nothing overflows or underflows in the
/// dominant bins.
fn raw_bins(sims: &[f64], tau: f64) -> (Vec<f64>, Vec<f64>) {
    let mut hist = vec![0.0; CURVE_BINS];
    let mut cum = vec![0.0; CURVE_BINS];
    let top = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for &s in sims {
        let b = curve_bin(s);
        hist[b] += 1.0;
        cum[b] += ((s - top) / tau).exp();
    }
    (hist, cum)
}

fn individual_curve(tau: f64) -> Vec<f64> {
    let top = ContributionCurves::bin_center(CURVE_BINS - 1);
    (0..CURVE_BINS)
        .map(|b| ((ContributionCurves::bin_center(b) - top) / tau).exp())
        .collect()
}

/// Curves for one set of negative similarities at temperature `tau`.
pub fn contribution_curves(negatives: &[f64], tau: f64) -> Result<ContributionCurves> {
    check_tau(tau)?;
    check_sims(negatives)?;
    let (histogram, mut cumulative) = raw_bins(negatives, tau);
    normalize_max(&mut cumulative);
    Ok(ContributionCurves {
        bin_edges: bin_edges(),
        individual: individual_curve(tau),
        cumulative,
        histogram,
    })
}

/// Curves over the off-diagonal entries of a similarity matrix.
pub fn contribution_curves_matrix(
    s: &SimilarityMatrix,
    tau: f64,
    aggregation: CurveAggregation,
) -> Result<ContributionCurves> {
    check_tau(tau)?;
    let negatives_of = |i: usize| -> Vec<f64> {
        s.row(i).iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &v)| v).collect()
    };
    match aggregation {
        CurveAggregation::Pooled => {
            let all: Vec<f64> = (0..s.anchors()).flat_map(negatives_of).collect();
            contribution_curves(&all, tau)
        }
        CurveAggregation::MeanOverAnchors => {
            let n = s.anchors() as f64;
            let mut histogram = vec![0.0; CURVE_BINS];
            let mut cumulative = vec![0.0; CURVE_BINS];
            for i in 0..s.anchors() {
                let c = contribution_curves(&negatives_of(i), tau)?;
                histogram.iter_mut().zip(&c.histogram).for_each(|(a, b)| *a += b / n);
                cumulative.iter_mut().zip(&c.cumulative).for_each(|(a, b)| *a += b / n);
            }
            normalize_max(&mut cumulative);
            Ok(ContributionCurves {
                bin_edges: bin_edges(),
                individual: individual_curve(tau),
                cumulative,
                histogram,
            })
        }
    }
}

/// `c_ii = exp((1 - s_ii)/τ_i)` for every anchor.
pub fn positive_factor(s: &SimilarityMatrix, tau: &TauVector) -> Result<Vec<f64>> {
    if tau.len() != s.anchors() {
        return Err(Error::Shape(format!(
            "{} temperatures for {} anchors",
            tau.len(),
            s.anchors()
        )));
    }
    Ok((0..s.anchors())
        .map(|i| ((1.0 - s.values()[(i, i)]) / tau.as_slice()[i]).exp())
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaResult {
    /// `n x components` projections of the centered data.
    pub coords: Matrix,
    /// `D x components` principal axes as columns.
    pub axes: Matrix,
    /// All `D` covariance eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    pub explained_ratio: Vec<f64>,
    pub mean: Vec<f64>,
}

/// Principal components of the rows of `x`. Each axis is signed so that its
/// largest-magnitude loading is positive.
pub fn pca_project(x: &Matrix, components: usize) -> Result<PcaResult> {
    let (n, d) = x.shape();
    if n <= components {
        return Err(Error::InvalidInput(format!("need more than {components} rows, got {n}")));
    }
    if components == 0 || components > d {
        return Err(Error::InvalidInput(format!("components must lie in 1..={d}, got {components}")));
    }
    let mut mean = vec![0.0; d];
    for r in x.row_iter() {
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = Matrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let mut cov = centered.t_matmul(&centered)?;
    cov.scale(1.0 / (n - 1) as f64);
    // Exact symmetry, independent of summation order.
    for i in 0..d {
        for j in 0..i {
            let v = 0.5 * (cov[(i, j)] + cov[(j, i)]);
            cov.as_mut_slice()[i * d + j] = v;
            cov.as_mut_slice()[j * d + i] = v;
        }
    }
    let (eigenvalues, vecs) = symmetric_eigen(&cov, 1e-12)?;
    let mut axes = Matrix::from_fn(d, components, |i, c| vecs[(i, c)]);
    for c in 0..components {
        let lead = (0..d).fold(0, |best, i| if axes[(i, c)].abs() > axes[(best, c)].abs() { i } else { best });
        if axes[(lead, c)] < 0.0 {
            for i in 0..d {
                axes.as_mut_slice()[i * components + c] *= -1.0;
            }
        }
    }
    let total: f64 = eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let explained_ratio = eigenvalues[..components]
        .iter()
        .map(|v| if total > 0.0 { v.max(0.0) / total } else { 0.0 })
        .collect();
    let coords = centered.matmul(&axes)?;
    Ok(PcaResult { coords, axes, eigenvalues, explained_ratio, mean })
}

pub fn coverage_csv(h: &CoverageHistogram) -> String {
    let mut s = String::from("bin,count\n");
    for (b, c) in h.counts.iter().enumerate() {
        writeln!(s, "{b},{c}").unwrap();
    }
    s
}

pub fn curves_csv(c: &ContributionCurves) -> String {
    let mut s = String::from("bin_center,histogram,individual,cumulative\n");
    for b in 0..CURVE_BINS {
        writeln!(
            s,
            "{},{},{},{}",
            ContributionCurves::bin_center(b),
            c.histogram[b],
            c.individual[b],
            c.cumulative[b]
        )
        .unwrap();
    }
    s
}

pub fn pca_csv(p: &PcaResult, labels: &[usize]) -> String {
    let k = p.coords.cols();
    let mut s = String::from("index,label");
    for c in 1..=k {
        write!(s, ",pc{c}").unwrap();
    }
    s.push('\n');
    for (i, row) in p.coords.row_iter().enumerate() {
        write!(s, "{i},{}", labels.get(i).map_or(String::new(), |l| l.to_string())).unwrap();
        for v in row {
            write!(s, ",{v}").unwrap();
        }
        s.push('\n');
    }
    s
}
