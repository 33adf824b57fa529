//! InfoNCE in similarity form and distance form, with closed-form gradients.
//!
//! Row `i` of a [`SimilarityMatrix`] belongs to anchor `u_i`; column `j` to key
//! `v_j`. The positive for anchor `i` sits in column `i`, every other column is
//! a negative. Matrices may carry extra key columns beyond the anchors (queued
//! negatives), so the shape is `N x M` with `M >= N`.

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix};

/// Slack allowed on the cosine bounds before a similarity is rejected.
pub const COSINE_SLACK: f64 = 1e-9;

/// Tolerance on row norms for inputs that must lie on the unit sphere.
pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix(Matrix);

impl SimilarityMatrix {
    pub fn new(values: Matrix) -> Result<Self> {
        let (n, m) = values.shape();
        if n < 1 || m < 2 || m < n {
            return Err(Error::Shape(format!(
                "similarity matrix must be N x M with M >= N and M >= 2, got {n} x {m}"
            )));
        }
        for i in 0..n {
            for (j, &s) in values.row(i).iter().enumerate() {
                if !s.is_finite() {
                    return Err(Error::InvalidInput(format!("non-finite similarity at ({i}, {j})")));
                }
                if s.abs() > 1.0 + COSINE_SLACK {
                    return Err(Error::InvalidInput(format!(
                        "similarity {s} at ({i}, {j}) lies outside [-1, 1]"
                    )));
                }
            }
        }
        Ok(Self(values))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    pub fn anchors(&self) -> usize {
        self.0.rows()
    }

    pub fn keys(&self) -> usize {
        self.0.cols()
    }

    pub fn is_square(&self) -> bool {
        self.0.rows() == self.0.cols()
    }

    pub fn values(&self) -> &Matrix {
        &self.0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    pub fn transpose(&self) -> Result<Self> {
        if !self.is_square() {
            return Err(Error::Shape("only square similarity matrices can be transposed".into()));
        }
        Ok(Self(self.0.transpose()))
    }
}

/// One strictly positive, finite temperature per anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct TauVector(Vec<f64>);

impl TauVector {
    pub fn new(taus: Vec<f64>) -> Result<Self> {
        if let Some((i, t)) = taus.iter().enumerate().find(|(_, t)| !(t.is_finite() && **t > 0.0)) {
            return Err(Error::InvalidInput(format!(
                "temperature {t} for anchor {i} must be positive and finite"
            )));
        }
        Ok(Self(taus))
    }

    pub fn uniform(tau: f64, n: usize) -> Result<Self> {
        Self::new(vec![tau; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub per_anchor: Vec<f64>,
    pub mean: f64,
    /// `S_i`: sum over negatives of `exp(-d_ij)`.
    pub negative_sums: Vec<f64>,
    /// `c_ii = exp(d_ii)`.
    pub positive_factors: Vec<f64>,
}

/// `∂(mean loss)/∂s_ij`, same shape as the similarity matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMatrix(Matrix);

impl GradientMatrix {
    pub fn values(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }
}

/// Whether the loss runs over anchors only or is averaged with the
/// transposed-roles loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Direction {
    #[default]
    Forward,
    Symmetric,
}

/// Cosine similarities `s_ij = <u_i, v_j>`, clamped to `[-1, 1]`.
pub fn similarity_matrix(u: &Matrix, v: &Matrix) -> Result<SimilarityMatrix> {
    if u.shape() != v.shape() {
        return Err(Error::Shape(format!(
            "anchor batch {:?} vs key batch {:?}",
            u.shape(),
            v.shape()
        )));
    }
    similarity_against(u, v)
}

/// Like [`similarity_matrix`] but allows a key set larger than the anchor set.
pub fn similarity_against(u: &Matrix, keys: &Matrix) -> Result<SimilarityMatrix> {
    if u.cols() != keys.cols() {
        return Err(Error::Shape(format!(
            "anchor width {} vs key width {}",
            u.cols(),
            keys.cols()
        )));
    }
    check_unit_rows(u)?;
    check_unit_rows(keys)?;
    let mut s = Matrix::zeros(u.rows(), keys.rows());
    for i in 0..u.rows() {
        for j in 0..keys.rows() {
            s[(i, j)] = dot(u.row(i), keys.row(j)).clamp(-1.0, 1.0);
        }
    }
    SimilarityMatrix::new(s)
}

pub(crate) fn check_unit_rows(m: &Matrix) -> Result<()> {
    for (row, r) in m.row_iter().enumerate() {
        let nrm = norm(r);
        if !((nrm - 1.0).abs() <= UNIT_NORM_TOL) {
            return Err(Error::NotNormalized { row, norm: nrm });
        }
    }
    Ok(())
}

fn check_tau(s: &SimilarityMatrix, tau: &TauVector) -> Result<()> {
    if tau.len() != s.anchors() {
        return Err(Error::Shape(format!(
            "{} temperatures for {} anchors",
            tau.len(),
            s.anchors()
        )));
    }
    Ok(())
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `log(1 + exp(x))` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `S_i` and `c_ii` for one anchor.
fn distance_terms(row: &[f64], i: usize, tau: f64) -> (f64, f64) {
    let neg_sum = row
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &s)| (-(1.0 - s) / tau).exp())
        .sum();
    (neg_sum, ((1.0 - row[i]) / tau).exp())
}

fn finish(per_anchor: Vec<f64>, negative_sums: Vec<f64>, positive_factors: Vec<f64>) -> LossBreakdown {
    let mean = per_anchor.iter().sum::<f64>() / per_anchor.len() as f64;
    LossBreakdown {
        per_anchor,
        mean,
        negative_sums,
        positive_factors,
    }
}

/// InfoNCE in similarity form, via a row-max-shifted log-sum-exp.
pub fn info_nce(s: &SimilarityMatrix, tau: &TauVector) -> Result<LossBreakdown> {
    check_tau(s, tau)?;
    let n = s.anchors();
    let mut per_anchor = Vec::with_capacity(n);
    let mut negative_sums = Vec::with_capacity(n);
    let mut positive_factors = Vec::with_capacity(n);
    for (i, &t) in tau.as_slice().iter().enumerate() {
        let row = s.row(i);
        let (arg, m) = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(ai, am), (j, &x)| {
                if x / t > am { (j, x / t) } else { (ai, am) }
            });
        // The max term contributes exactly 1; summing the rest separately
        // keeps precision when the loss is tiny.
        let rest: f64 = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != arg)
            .map(|(_, &x)| (x / t - m).exp())
            .sum();
        per_anchor.push(rest.ln_1p() + (m - row[i] / t));
        let (ns, pf) = distance_terms(row, i, t);
        negative_sums.push(ns);
        positive_factors.push(pf);
    }
    Ok(finish(per_anchor, negative_sums, positive_factors))
}

/// InfoNCE rewritten over distances `d_ij = (1 - s_ij) / τ_i`:
/// `log(1 + c_ii Σ_{j≠i} exp(-d_ij))`, evaluated in log space.
pub fn info_nce_distance_form(s: &SimilarityMatrix, tau: &TauVector) -> Result<LossBreakdown> {
    check_tau(s, tau)?;
    let n = s.anchors();
    let mut per_anchor = Vec::with_capacity(n);
    let mut negative_sums = Vec::with_capacity(n);
    let mut positive_factors = Vec::with_capacity(n);
    for (i, &t) in tau.as_slice().iter().enumerate() {
        let row = s.row(i);
        let d_ii = (1.0 - row[i]) / t;
        let lse_neg = log_sum_exp(
            row.iter()
                .enumerate()
                .filter(move |&(j, _)| j != i)
                .map(move |(_, &sij)| -(1.0 - sij) / t),
        );
        per_anchor.push(softplus(d_ii + lse_neg));
        negative_sums.push(lse_neg.exp());
        positive_factors.push(d_ii.exp());
    }
    Ok(finish(per_anchor, negative_sums, positive_factors))
}

/// Closed-form gradient of the mean loss with respect to every `s_ij`:
/// `w_ij / (τ_i N)` off the diagonal and `(w_ii - 1) / (τ_i N)` on it, where
/// `w_i·` is the row softmax of `s_i· / τ_i`.
pub fn info_nce_grad(s: &SimilarityMatrix, tau: &TauVector) -> Result<GradientMatrix> {
    check_tau(s, tau)?;
    let (n, m) = s.values().shape();
    let mut g = Matrix::zeros(n, m);
    for (i, &t) in tau.as_slice().iter().enumerate() {
        let row = s.row(i);
        let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b / t));
        let out = g.row_mut(i);
        let mut z = 0.0;
        for (o, &x) in out.iter_mut().zip(row) {
            *o = (x / t - mx).exp();
            z += *o;
        }
        let scale = 1.0 / (t * n as f64);
        for (j, o) in out.iter_mut().enumerate() {
            let w = *o / z;
            *o = if j == i { (w - 1.0) * scale } else { w * scale };
        }
    }
    Ok(GradientMatrix(g))
}

/// Loss and gradient together, optionally symmetrized over the two views.
///
/// The symmetric variant averages the anchor-row loss with the loss of the
/// transposed matrix (keys as anchors, same per-index temperatures) and
/// needs a square matrix.
pub fn info_nce_with_grad(
    s: &SimilarityMatrix,
    tau: &TauVector,
    direction: Direction,
) -> Result<(LossBreakdown, GradientMatrix)> {
    let fwd = info_nce(s, tau)?;
    let g = info_nce_grad(s, tau)?;
    match direction {
        Direction::Forward => Ok((fwd, g)),
        Direction::Symmetric => {
            let st = s.transpose()?;
            let bwd = info_nce(&st, tau)?;
            let gt = info_nce_grad(&st, tau)?.0.transpose();
            let mut gm = g.0;
            gm.add_assign(&gt)?;
            gm.scale(0.5);
            let per_anchor: Vec<f64> = fwd
                .per_anchor
                .iter()
                .zip(&bwd.per_anchor)
                .map(|(a, b)| 0.5 * (a + b))
                .collect();
            let mean = 0.5 * (fwd.mean + bwd.mean);
            Ok((
                LossBreakdown {
                    per_anchor,
                    mean,
                    negative_sums: fwd.negative_sums,
                    positive_factors: fwd.positive_factors,
                },
                GradientMatrix(gm),
            ))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::LN_2;

    fn sim(rows: &[Vec<f64>]) -> SimilarityMatrix {
        SimilarityMatrix::from_rows(rows).unwrap()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
    }

    #[test]
    fn identity_basis_similarity() {
        let e = Matrix::identity(2);
        let s = similarity_matrix(&e, &e).unwrap();
        assert_eq!(s.values(), &Matrix::identity(2));
    }

    #[test]
    fn antipodal_diagonal() {
        let u = Matrix::from_rows(&[vec![0.6, 0.0, 0.8], vec![0.0, -1.0, 0.0]]).unwrap();
        let mut v = u.clone();
        v.scale(-1.0);
        let s = similarity_matrix(&u, &v).unwrap();
        assert_eq!(s.values()[(0, 0)], -1.0);
        assert_eq!(s.values()[(1, 1)], -1.0);
    }

    #[test]
    fn similarity_rejects_bad_rows() {
        let u = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.5, 0.5]]).unwrap();
        let v = Matrix::identity(2);
        match similarity_matrix(&u, &v) {
            Err(Error::NotNormalized { row: 1, .. }) => {}
            other => panic!("expected row 1 rejected, got {other:?}"),
        }
        let w = Matrix::identity(3);
        assert!(matches!(similarity_matrix(&v, &w), Err(Error::Shape(_))));
    }

    #[test]
    fn similarity_matrix_shape_checks() {
        assert!(SimilarityMatrix::from_rows(&[vec![1.0]]).is_err());
        assert!(SimilarityMatrix::from_rows(&[vec![1.0, 1.2], vec![0.0, 1.0]]).is_err());
        assert!(SimilarityMatrix::from_rows(&[vec![1.0, f64::NAN], vec![0.0, 1.0]]).is_err());
        // Queue-style rectangular matrices are fine.
        assert!(SimilarityMatrix::from_rows(&[vec![1.0, 0.0, 0.2]]).is_ok());
    }

    #[test]
    fn uniform_two_way_softmax() {
        let s = sim(&[vec![0.0, 0.0], vec![0.0, 0.0]]);
        let l = info_nce(&s, &TauVector::uniform(1.0, 2).unwrap()).unwrap();
        for v in &l.per_anchor {
            assert!((v - LN_2).abs() < 1e-15);
        }
        assert!((l.mean - 0.693147).abs() < 1e-6);
    }

    #[test]
    fn equal_similarities_give_log_n() {
        for &v in &[-0.7, 0.0, 0.3, 1.0] {
            for &t in &[0.07, 0.5, 3.0] {
                let s = sim(&vec![vec![v; 4]; 4]);
                let l = info_nce(&s, &TauVector::uniform(t, 4).unwrap()).unwrap();
                for x in &l.per_anchor {
                    assert!((x - 4f64.ln()).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn separated_pair_value() {
        let s = sim(&[vec![1.0, -1.0], vec![-1.0, 1.0]]);
        let tau = TauVector::uniform(0.5, 2).unwrap();
        let expected = (-4f64).exp().ln_1p();
        for l in [info_nce(&s, &tau).unwrap(), info_nce_distance_form(&s, &tau).unwrap()] {
            for v in &l.per_anchor {
                assert!(rel(*v, expected) < 1e-12);
            }
        }
        assert!((expected - 0.018150).abs() < 1e-6);
    }

    #[test]
    fn distance_form_zero_distances() {
        let s = sim(&vec![vec![1.0; 5]; 5]);
        let l = info_nce_distance_form(&s, &TauVector::uniform(0.2, 5).unwrap()).unwrap();
        for i in 0..5 {
            assert_eq!(l.positive_factors[i], 1.0);
            assert!((l.per_anchor[i] - 5f64.ln()).abs() < 1e-14);
        }
    }

    #[test]
    fn distance_form_unit_distances() {
        let s = sim(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
        let l = info_nce_distance_form(&s, &TauVector::uniform(0.5, 2).unwrap()).unwrap();
        for v in &l.per_anchor {
            assert!(rel(*v, LN_2) < 1e-14);
        }
        assert!(rel(l.positive_factors[0], std::f64::consts::E) < 1e-15);
    }

    #[test]
    fn rejects_bad_tau() {
        let s = sim(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(TauVector::new(vec![0.5, 0.0]).is_err());
        assert!(TauVector::new(vec![0.5, -1.0]).is_err());
        assert!(TauVector::new(vec![0.5, f64::INFINITY]).is_err());
        let short = TauVector::uniform(0.5, 3).unwrap();
        assert!(info_nce(&s, &short).is_err());
        assert!(info_nce_grad(&s, &short).is_err());
    }

    #[test]
    fn uniform_gradient_values() {
        let s = sim(&vec![vec![0.3; 4]; 4]);
        let g = info_nce_grad(&s, &TauVector::uniform(0.5, 4).unwrap()).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { -0.375 } else { 0.125 };
                assert!((g.values()[(i, j)] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn symmetric_mode_on_symmetric_input() {
        let s = sim(&[vec![0.9, 0.1, -0.2], vec![0.1, 0.8, 0.4], vec![-0.2, 0.4, 0.7]]);
        let tau = TauVector::uniform(0.3, 3).unwrap();
        let (f, gf) = info_nce_with_grad(&s, &tau, Direction::Forward).unwrap();
        let (b, gb) = info_nce_with_grad(&s, &tau, Direction::Symmetric).unwrap();
        assert!((f.mean - b.mean).abs() < 1e-15);
        let mut want = gf.values().clone();
        want.add_assign(&gf.values().transpose()).unwrap();
        want.scale(0.5);
        assert!(want.max_abs_diff(gb.values()) < 1e-15);
    }

    #[test]
    fn symmetric_mode_needs_square() {
        let s = sim(&[vec![0.9, 0.1, -0.2]]);
        let tau = TauVector::uniform(0.3, 1).unwrap();
        assert!(info_nce_with_grad(&s, &tau, Direction::Forward).is_ok());
        assert!(info_nce_with_grad(&s, &tau, Direction::Symmetric).is_err());
    }

    fn sim_strategy() -> impl Strategy<Value = (SimilarityMatrix, TauVector)> {
        (2usize..10, 0usize..4).prop_flat_map(|(n, extra)| {
            (
                prop::collection::vec(-1.0f64..=1.0, n * (n + extra)),
                prop::collection::vec(0.05f64..2.0, n),
            )
                .prop_map(move |(vals, taus)| {
                    (
                        SimilarityMatrix::new(Matrix::from_vec(n, n + extra, vals).unwrap()).unwrap(),
                        TauVector::new(taus).unwrap(),
                    )
                })
        })
    }

    proptest! {
        #[test]
        fn forms_agree((s, tau) in sim_strategy()) {
            let a = info_nce(&s, &tau).unwrap();
            let b = info_nce_distance_form(&s, &tau).unwrap();
            for i in 0..s.anchors() {
                prop_assert!(rel(b.per_anchor[i], a.per_anchor[i]) < 1e-9);
            }
        }

        #[test]
        fn breakdown_is_consistent((s, tau) in sim_strategy()) {
            let l = info_nce(&s, &tau).unwrap();
            for i in 0..s.anchors() {
                let recomputed = (l.positive_factors[i] * l.negative_sums[i]).ln_1p();
                prop_assert!(rel(recomputed, l.per_anchor[i]) < 1e-12);
            }
            let mean = l.per_anchor.iter().sum::<f64>() / l.per_anchor.len() as f64;
            prop_assert!(rel(mean, l.mean) < 1e-12);
        }

        #[test]
        fn loss_bounds((s, tau) in sim_strategy()) {
            let l = info_nce(&s, &tau).unwrap();
            let m = s.keys() as f64;
            for (i, &t) in tau.as_slice().iter().enumerate() {
                let lower = ((m - 1.0) * (-2.0 / t).exp()).ln_1p();
                prop_assert!(l.per_anchor[i] >= 0.0);
                prop_assert!(l.per_anchor[i] >= lower * (1.0 - 1e-12));
            }
        }

        #[test]
        fn row_shift_invariance((s, tau) in sim_strategy(), shift in -0.5f64..0.5) {
            let base = info_nce(&s, &tau).unwrap();
            // Shifted rows can leave [-1, 1], so evaluate the log-softmax directly.
            for (i, &t) in tau.as_slice().iter().enumerate() {
                let row: Vec<f64> = s.row(i).iter().map(|x| (x + shift) / t).collect();
                let lse = log_sum_exp(row.iter().copied());
                prop_assert!((lse - row[i] - base.per_anchor[i]).abs() < 1e-9 * (1.0 + base.per_anchor[i]));
            }
        }

        #[test]
        fn gradient_signs_and_row_sums((s, tau) in sim_strategy()) {
            let g = info_nce_grad(&s, &tau).unwrap();
            let n = s.anchors();
            for i in 0..n {
                let row = g.values().row(i);
                let sum: f64 = row.iter().sum();
                prop_assert!(sum.abs() < 1e-12);
                for (j, &x) in row.iter().enumerate() {
                    if i == j { prop_assert!(x < 0.0) } else { prop_assert!(x >= 0.0) }
                }
            }
        }

        #[test]
        fn hardness_awareness((s, tau) in sim_strategy()) {
            let g = info_nce_grad(&s, &tau).unwrap();
            for i in 0..s.anchors() {
                let mut pairs: Vec<(f64, f64)> = s.row(i).iter().zip(g.values().row(i))
                    .enumerate().filter(|(j, _)| *j != i).map(|(_, (a, b))| (*a, *b)).collect();
                pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
                for w in pairs.windows(2) {
                    if w[1].0 > w[0].0 {
                        prop_assert!(w[1].1 >= w[0].1);
                    }
                }
            }
        }

        #[test]
        fn scalar_tau_matches_vector(vals in prop::collection::vec(-1.0f64..=1.0, 9), t in 0.05f64..2.0) {
            let s = SimilarityMatrix::new(Matrix::from_vec(3, 3, vals).unwrap()).unwrap();
            let a = info_nce(&s, &TauVector::uniform(t, 3).unwrap()).unwrap();
            let b = info_nce(&s, &TauVector::new(vec![t, t, t]).unwrap()).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
