//! kNN and linear-probe evaluation with head/mid/tail breakdowns.

use std::cmp::Ordering;
use std::fmt::Write as _;

use rand::seq::SliceRandom;

use crate::data::{Group, GroupPartition};
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::loss::check_unit_rows;
use crate::parallel::{par_map, thread_count};
use crate::rng;

/// Train rows ordered by decreasing cosine to `query`, ties by index; only
/// the first `k` are returned.
fn nearest(train: &Matrix, query: &[f64], k: usize) -> Vec<(f64, usize)> {
    let mut all: Vec<(f64, usize)> = train.row_iter().enumerate().map(|(j, r)| (dot(r, query), j)).collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    if k < all.len() {
        all.select_nth_unstable_by(k - 1, cmp);
        all.truncate(k);
    }
    all.sort_unstable_by(cmp);
    all
}

/// Majority vote; ties go to the class whose best-ranked member is closest,
/// then to the smaller class id.
fn vote(neighbors: &[(f64, usize)], labels: &[usize]) -> usize {
    // (class, votes, best similarity)
    let mut tally: Vec<(usize, usize, f64)> = Vec::new();
    for &(sim, j) in neighbors {
        let c = labels[j];
        match tally.iter_mut().find(|t| t.0 == c) {
            Some(t) => t.1 += 1,
            None => tally.push((c, 1, sim)),
        }
    }
    tally
        .into_iter()
        .max_by(|a, b| {
            a.1.cmp(&b.1)
                .then(a.2.total_cmp(&b.2))
                .then(b.0.cmp(&a.0))
        })
        .map(|t| t.0)
        .expect("k >= 1")
}

fn check_knn(train: &Matrix, train_labels: &[usize], test: &Matrix, k: usize) -> Result<()> {
    if train.rows() != train_labels.len() {
        return Err(Error::Shape(format!(
            "{} train rows but {} labels",
            train.rows(),
            train_labels.len()
        )));
    }
    if train.cols() != test.cols() {
        return Err(Error::Shape(format!(
            "train width {} vs test width {}",
            train.cols(),
            test.cols()
        )));
    }
    if k == 0 || k > train.rows() {
        return Err(Error::InvalidInput(format!("k = {k} outside 1..={}", train.rows())));
    }
    check_unit_rows(train)?;
    check_unit_rows(test)
}

pub fn knn_classify(train: &Matrix, train_labels: &[usize], test: &Matrix, k: usize) -> Result<Vec<usize>> {
    Ok(knn_classify_multi(train, train_labels, test, &[k])?.remove(0))
}

/// Predictions for several `k` at once from a single neighbor search.
pub fn knn_classify_multi(
    train: &Matrix,
    train_labels: &[usize],
    test: &Matrix,
    ks: &[usize],
) -> Result<Vec<Vec<usize>>> {
    let kmax = ks.iter().copied().max().unwrap_or(0);
    for &k in ks {
        check_knn(train, train_labels, test, k)?;
    }
    if ks.is_empty() {
        return Ok(Vec::new());
    }
    let per_row = par_map(test.rows(), thread_count(), |i| {
        let nb = nearest(train, test.row(i), kmax);
        ks.iter().map(|&k| vote(&nb[..k], train_labels)).collect::<Vec<_>>()
    });
    Ok((0..ks.len()).map(|m| per_row.iter().map(|p| p[m]).collect()).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyBreakdown {
    pub overall: f64,
    /// NaN for classes absent from the test set.
    pub per_class: Vec<f64>,
    pub support: Vec<usize>,
    /// Mean per-class accuracy over head, mid and tail classes.
    pub group_means: [f64; 3],
}

impl AccuracyBreakdown {
    pub fn group(&self, g: Group) -> f64 {
        self.group_means[g as usize]
    }
}

pub fn accuracy_breakdown(
    predicted: &[usize],
    truth: &[usize],
    partition: &GroupPartition,
) -> Result<AccuracyBreakdown> {
    if predicted.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::InvalidInput("empty test set".into()));
    }
    let k = partition.num_classes();
    let mut correct = vec![0usize; k];
    let mut support = vec![0usize; k];
    for (&p, &t) in predicted.iter().zip(truth) {
        if t >= k {
            return Err(Error::InvalidInput(format!("label {t} outside 0..{k}")));
        }
        support[t] += 1;
        correct[t] += usize::from(p == t);
    }
    let per_class: Vec<f64> = correct
        .iter()
        .zip(&support)
        .map(|(&c, &n)| if n == 0 { f64::NAN } else { c as f64 / n as f64 })
        .collect();
    let overall = correct.iter().sum::<usize>() as f64 / truth.len() as f64;
    let mut group_means = [f64::NAN; 3];
    for g in Group::ALL {
        let vals: Vec<f64> = partition
            .members(g)
            .iter()
            .map(|&c| per_class[c])
            .filter(|v| !v.is_nan())
            .collect();
        if !vals.is_empty() {
            group_means[g as usize] = vals.iter().sum::<f64>() / vals.len() as f64;
        }
    }
    Ok(AccuracyBreakdown { overall, per_class, support, group_means })
}

/// Named accuracy breakdowns from one evaluation snapshot.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    metrics: Vec<(String, AccuracyBreakdown)>,
}

pub const EVAL_CSV_HEADER: &str = "epoch,metric,scope,value";

impl EvalReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, acc: AccuracyBreakdown) {
        let name = name.into();
        self.metrics.retain(|(n, _)| *n != name);
        self.metrics.push((name, acc));
    }

    pub fn extend(&mut self, other: EvalReport) {
        for (n, a) in other.metrics {
            self.push(n, a);
        }
    }

    pub fn get(&self, name: &str) -> Option<&AccuracyBreakdown> {
        self.metrics.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn knn1(&self) -> Option<&AccuracyBreakdown> {
        self.get("knn1")
    }

    pub fn knn10(&self) -> Option<&AccuracyBreakdown> {
        self.get("knn10")
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &AccuracyBreakdown)> {
        self.metrics.iter().map(|(n, a)| (n.as_str(), a))
    }

    /// `(metric, scope, value)` rows: overall, the three groups, then classes.
    pub fn rows(&self) -> Vec<(String, String, f64)> {
        let mut out = Vec::new();
        for (name, acc) in &self.metrics {
            out.push((name.clone(), "all".to_string(), acc.overall));
            for g in Group::ALL {
                out.push((name.clone(), g.name().to_string(), acc.group(g)));
            }
            for (c, v) in acc.per_class.iter().enumerate() {
                out.push((name.clone(), format!("class_{c}"), *v));
            }
        }
        out
    }

    pub fn to_csv(&self, epoch: u64) -> String {
        let mut s = String::from(EVAL_CSV_HEADER);
        s.push('\n');
        for (m, scope, v) in self.rows() {
            writeln!(s, "{epoch},{m},{scope},{v}").unwrap();
        }
        s
    }
}

/// kNN accuracies for each `k`, reported as metrics `knn{k}`.
pub fn knn_report(
    train: &Matrix,
    train_labels: &[usize],
    test: &Matrix,
    test_labels: &[usize],
    ks: &[usize],
    partition: &GroupPartition,
) -> Result<EvalReport> {
    if test.rows() != test_labels.len() {
        return Err(Error::Shape(format!(
            "{} test rows but {} labels",
            test.rows(),
            test_labels.len()
        )));
    }
    let preds = knn_classify_multi(train, train_labels, test, ks)?;
    let mut report = EvalReport::new();
    for (&k, p) in ks.iter().zip(&preds) {
        report.push(format!("knn{k}"), accuracy_breakdown(p, test_labels, partition)?);
    }
    Ok(report)
}

/// `min_c |class c|` samples from every class, drawn by a per-class seeded
/// shuffle and returned in increasing index order.
pub fn fewshot_subset(labels: &[usize], num_classes: usize, seed: u64) -> Result<Vec<usize>> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(Error::InvalidInput(format!("label {l} outside 0..{num_classes}")));
        }
        by_class[l].push(i);
    }
    let shot = by_class.iter().map(Vec::len).min().unwrap_or(0);
    if shot == 0 {
        return Err(Error::InvalidInput("every class needs at least one sample".into()));
    }
    let mut out = Vec::with_capacity(shot * num_classes);
    for (c, mut idx) in by_class.into_iter().enumerate() {
        idx.shuffle(&mut rng::stream(seed, &[rng::TAG_FEWSHOT, c as u64]));
        out.extend_from_slice(&idx[..shot]);
    }
    out.sort_unstable();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeMode {
    /// Balanced few-shot subset of the training set.
    FewShot,
    /// Every training row.
    LongTail,
}

impl ProbeMode {
    pub fn metric_name(self) -> &'static str {
        match self {
            ProbeMode::FewShot => "fs_lp",
            ProbeMode::LongTail => "lt_lp",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub mode: ProbeMode,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl ProbeConfig {
    pub fn new(mode: ProbeMode, epochs: usize, lr: f64, seed: u64) -> Result<Self> {
        if epochs == 0 {
            return Err(Error::Config("probe epochs must be positive".into()));
        }
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::Config(format!("probe lr must be positive, got {lr}")));
        }
        Ok(Self { mode, epochs, lr, seed })
    }
}

/// Multinomial logistic regression `softmax(x W + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxProbe {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl SoftmaxProbe {
    pub fn zeros(dim: usize, num_classes: usize) -> Self {
        Self { weight: Matrix::zeros(dim, num_classes), bias: vec![0.0; num_classes] }
    }

    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        let mut z = x.matmul(&self.weight)?;
        for i in 0..z.rows() {
            z.row_mut(i).iter_mut().zip(&self.bias).for_each(|(v, b)| *v += b);
        }
        Ok(z)
    }

    /// Argmax class per row, lowest index on ties.
    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        let z = self.logits(x)?;
        Ok(z.row_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (c, &v)| if v > best.1 { (c, v) } else { best })
                    .0
            })
            .collect())
    }
}

/// Mean cross-entropy and its gradient with respect to the probe.
pub fn probe_loss_grad(probe: &SoftmaxProbe, x: &Matrix, y: &[usize]) -> Result<(f64, SoftmaxProbe)> {
    if x.rows() != y.len() {
        return Err(Error::Shape(format!("{} rows but {} labels", x.rows(), y.len())));
    }
    let k = probe.bias.len();
    let n = x.rows() as f64;
    let mut p = probe.logits(x)?;
    let mut loss = 0.0;
    for (i, &yi) in y.iter().enumerate() {
        if yi >= k {
            return Err(Error::InvalidInput(format!("label {yi} outside 0..{k}")));
        }
        let row = p.row_mut(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        loss += z.ln() + m - row[yi];
        for v in row.iter_mut() {
            *v = (*v - m).exp() / z / n;
        }
        row[yi] -= 1.0 / n;
    }
    let weight = x.t_matmul(&p)?;
    let mut bias = vec![0.0; k];
    for r in p.row_iter() {
        bias.iter_mut().zip(r).for_each(|(b, v)| *b += v);
    }
    Ok((loss / n, SoftmaxProbe { weight, bias }))
}

/// Full-batch gradient descent from zero initialization.
pub fn train_probe(x: &Matrix, y: &[usize], num_classes: usize, epochs: usize, lr: f64) -> Result<SoftmaxProbe> {
    let first = y.first().copied();
    if first.is_none() || y.iter().all(|&l| Some(l) == first) {
        return Err(Error::InvalidInput("probe training data must contain at least two classes".into()));
    }
    let mut probe = SoftmaxProbe::zeros(x.cols(), num_classes);
    for _ in 0..epochs {
        let (_, g) = probe_loss_grad(&probe, x, y)?;
        for (w, d) in probe.weight.as_mut_slice().iter_mut().zip(g.weight.as_slice()) {
            *w -= lr * d;
        }
        for (b, d) in probe.bias.iter_mut().zip(&g.bias) {
            *b -= lr * d;
        }
    }
    Ok(probe)
}

pub fn linear_probe(
    train: &Matrix,
    train_labels: &[usize],
    test: &Matrix,
    test_labels: &[usize],
    partition: &GroupPartition,
    cfg: &ProbeConfig,
) -> Result<AccuracyBreakdown> {
    if train.rows() != train_labels.len() || test.rows() != test_labels.len() {
        return Err(Error::Shape("embedding rows and labels differ in count".into()));
    }
    let k = partition.num_classes();
    let probe = match cfg.mode {
        ProbeMode::LongTail => train_probe(train, train_labels, k, cfg.epochs, cfg.lr)?,
        ProbeMode::FewShot => {
            let idx = fewshot_subset(train_labels, k, cfg.seed)?;
            let y: Vec<usize> = idx.iter().map(|&i| train_labels[i]).collect();
            train_probe(&train.select_rows(&idx), &y, k, cfg.epochs, cfg.lr)?
        }
    };
    accuracy_breakdown(&probe.predict(test)?, test_labels, partition)
}

/// Orders `(similarity, index)` pairs the way the kNN search does.
pub fn neighbor_order(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::head_mid_tail_split;
    use rand::Rng as _;
    use rand_distr::{Distribution, StandardNormal};

    fn unit_rows(n: usize, d: usize, seed: u64) -> Matrix {
        let mut r = rng::stream(seed, &[7]);
        let mut m = Matrix::from_fn(n, d, |_, _| StandardNormal.sample(&mut r));
        for i in 0..n {
            let row = m.row_mut(i);
            let nr = crate::linalg::norm(row);
            row.iter_mut().for_each(|v| *v /= nr);
        }
        m
    }

    /// Euclidean distances, full sort, explicit vote.
    fn oracle(train: &Matrix, labels: &[usize], test: &Matrix, k: usize) -> Vec<usize> {
        test.row_iter()
            .map(|q| {
                let mut d: Vec<(f64, usize)> = train
                    .row_iter()
                    .enumerate()
                    .map(|(j, r)| (r.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(), j))
                    .collect();
                d.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
                let top = &d[..k];
                let max_c = labels.iter().max().unwrap() + 1;
                let mut votes = vec![0usize; max_c];
                let mut best = vec![f64::INFINITY; max_c];
                for &(dist, j) in top {
                    votes[labels[j]] += 1;
                    best[labels[j]] = best[labels[j]].min(dist);
                }
                let mv = *votes.iter().max().unwrap();
                (0..max_c)
                    .filter(|&c| votes[c] == mv)
                    .min_by(|&a, &b| best[a].partial_cmp(&best[b]).unwrap().then(a.cmp(&b)))
                    .unwrap()
            })
            .collect()
    }

    #[test]
    fn single_train_sample() {
        let train = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let test = unit_rows(5, 2, 1);
        assert_eq!(knn_classify(&train, &[3], &test, 1).unwrap(), vec![3; 5]);
    }

    #[test]
    fn majority_vote() {
        let nb = [(0.9, 0), (0.8, 1), (0.7, 2)];
        assert_eq!(vote(&nb, &[5, 5, 9]), 5);
        // 1-1 tie: the class of the closest neighbor wins.
        assert_eq!(vote(&[(0.9, 0), (0.8, 1)], &[9, 5]), 9);
        // Equal distances: smaller class id.
        assert_eq!(vote(&[(0.8, 0), (0.8, 1)], &[9, 5]), 5);
    }

    #[test]
    fn matches_brute_force() {
        for seed in 0..20 {
            let train = unit_rows(50, 4, seed);
            let test = unit_rows(30, 4, seed + 100);
            let labels: Vec<usize> = (0..50).map(|i| (i * 7 + seed as usize) % 4).collect();
            for k in [1, 10] {
                assert_eq!(knn_classify(&train, &labels, &test, k).unwrap(), oracle(&train, &labels, &test, k));
            }
        }
    }

    #[test]
    fn euclidean_and_cosine_orders_agree() {
        let train = unit_rows(40, 5, 3);
        let q = unit_rows(1, 5, 4);
        let mut by_cos = nearest(&train, q.row(0), 40);
        by_cos.sort_by(neighbor_order);
        let mut by_dist: Vec<(f64, usize)> = train
            .row_iter()
            .enumerate()
            .map(|(j, r)| (r.iter().zip(q.row(0)).map(|(a, b)| (a - b).powi(2)).sum::<f64>(), j))
            .collect();
        by_dist.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let a: Vec<usize> = by_cos.iter().map(|p| p.1).collect();
        let b: Vec<usize> = by_dist.iter().map(|p| p.1).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn knn_errors() {
        let train = unit_rows(3, 2, 0);
        assert!(knn_classify(&train, &[0, 1, 0], &unit_rows(1, 2, 1), 0).is_err());
        assert!(knn_classify(&train, &[0, 1, 0], &unit_rows(1, 2, 1), 4).is_err());
        assert!(knn_classify(&train, &[0, 1, 0], &unit_rows(1, 3, 1), 1).is_err());
        let bad = Matrix::from_rows(&[vec![2.0, 0.0]]).unwrap();
        assert!(knn_classify(&train, &[0, 1, 0], &bad, 1).is_err());
    }

    #[test]
    fn breakdown_values() {
        let part = head_mid_tail_split(&[3, 2, 1]).unwrap();
        let truth = [0, 0, 1, 1, 2, 2];
        let all = accuracy_breakdown(&truth, &truth, &part).unwrap();
        assert_eq!(all.overall, 1.0);
        assert!(all.group_means.iter().all(|&g| g == 1.0));
        let pred = [0, 0, 1, 0, 0, 0];
        let b = accuracy_breakdown(&pred, &truth, &part).unwrap();
        assert_eq!(b.per_class, vec![1.0, 0.5, 0.0]);
        assert_eq!(b.overall, 0.5);
        assert_eq!(b.group(Group::Tail), 0.0);
    }

    fn binary() -> GroupPartition {
        GroupPartition { head: [0].into(), mid: Default::default(), tail: [1].into() }
    }

    #[test]
    fn binary_one_class_wrong() {
        let part = binary();
        let truth = [0, 0, 0, 1, 1, 1];
        let b = accuracy_breakdown(&[0; 6], &truth, &part).unwrap();
        assert_eq!(b.overall, 0.5);
        assert_eq!(b.per_class[1], 0.0);
    }

    #[test]
    fn csv_layout() {
        let part = head_mid_tail_split(&[2, 1, 1]).unwrap();
        let mut r = EvalReport::new();
        r.push("knn1", accuracy_breakdown(&[0, 1, 2], &[0, 1, 2], &part).unwrap());
        let csv = r.to_csv(7);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "epoch,metric,scope,value");
        assert_eq!(lines[1], "7,knn1,all,1");
        assert_eq!(lines[2], "7,knn1,head,1");
        assert_eq!(lines.len(), 1 + 1 + 3 + 3);
        assert!(lines.last().unwrap().starts_with("7,knn1,class_2,"));
    }

    #[test]
    fn fewshot_is_balanced() {
        let labels: Vec<usize> = [0; 7].into_iter().chain([1; 3]).chain([2; 5]).collect();
        let s = fewshot_subset(&labels, 3, 4).unwrap();
        assert_eq!(s.len(), 9);
        for c in 0..3 {
            assert_eq!(s.iter().filter(|&&i| labels[i] == c).count(), 3);
        }
        assert_eq!(s, fewshot_subset(&labels, 3, 4).unwrap());
        let bal = [0, 1, 0, 1];
        assert_eq!(fewshot_subset(&bal, 2, 0).unwrap(), vec![0, 1, 2, 3]);
        assert!(fewshot_subset(&[0, 0], 2, 0).is_err());
    }

    #[test]
    fn probe_gradient_matches_finite_differences() {
        let mut r = rng::stream(5, &[]);
        let x = Matrix::from_fn(4, 3, |_, _| r.random_range(-1.0..1.0));
        let y = [0, 2, 1, 2];
        let mut probe = SoftmaxProbe {
            weight: Matrix::from_fn(3, 3, |_, _| r.random_range(-1.0..1.0)),
            bias: vec![0.1, -0.2, 0.3],
        };
        let (_, g) = probe_loss_grad(&probe, &x, &y).unwrap();
        let h = 1e-6;
        for i in 0..9 {
            let orig = probe.weight.as_slice()[i];
            probe.weight.as_mut_slice()[i] = orig + h;
            let lp = probe_loss_grad(&probe, &x, &y).unwrap().0;
            probe.weight.as_mut_slice()[i] = orig - h;
            let lm = probe_loss_grad(&probe, &x, &y).unwrap().0;
            probe.weight.as_mut_slice()[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let a = g.weight.as_slice()[i];
            assert!((a - fd).abs() / a.abs().max(1e-8) < 1e-5, "{a} vs {fd}");
        }
        for c in 0..3 {
            let orig = probe.bias[c];
            probe.bias[c] = orig + h;
            let lp = probe_loss_grad(&probe, &x, &y).unwrap().0;
            probe.bias[c] = orig - h;
            let lm = probe_loss_grad(&probe, &x, &y).unwrap().0;
            probe.bias[c] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!((g.bias[c] - fd).abs() / g.bias[c].abs().max(1e-8) < 1e-5);
        }
    }

    #[test]
    fn separable_probe_is_perfect() {
        let x = Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0], vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let y = [0, 1, 0, 1];
        let part = binary();
        let cfg = ProbeConfig::new(ProbeMode::LongTail, 200, 0.5, 0).unwrap();
        let acc = linear_probe(&x, &y, &x, &y, &part, &cfg).unwrap();
        assert_eq!(acc.overall, 1.0);
        assert!(train_probe(&x, &[1, 1, 1, 1], 2, 10, 0.5).is_err());
    }
}
