use rand::seq::SliceRandom;

use super::network::{backward_cached, forward, EncoderParams};
use super::optim::{lr_at, momentum_update, sgd_step, OptimState};
use super::queue::NegativeSource;
use crate::data::{augment, AugmentationPolicy};
use crate::data::LongTailDataset;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::loss::{info_nce_with_grad, similarity_against, Direction, LossBreakdown, TauVector};
use crate::rng;
use crate::schedule::{per_anchor_tau, CoarseTauConfig, ScheduleConfig};

/// Everything about an epoch that is fixed for the whole run.
#[derive(Debug, Clone)]
pub struct TrainSpec {
    pub schedule: ScheduleConfig,
    /// When set, per-anchor temperatures come from the class partition and
    /// the schedule is ignored.
    pub coarse: Option<CoarseTauConfig>,
    pub policy: AugmentationPolicy,
    pub batch_size: usize,
    /// Only applies to in-batch negatives; the queue loss is anchor-only.
    pub direction: Direction,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: u64,
    pub mean_loss: f64,
    /// Scalar temperature of the epoch (the schedule value even in coarse mode).
    pub tau: f64,
    pub lr: f64,
    pub batches: usize,
    pub degenerate_rows: usize,
}

/// Shuffled index batches for one epoch; the trailing partial batch is
/// dropped unless the dataset is smaller than one batch.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::Config(format!("batch_size must be at least 2, got {batch_size}")));
    }
    if n < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 samples, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[rng::TAG_SHUFFLE, epoch]));
    let b = batch_size.min(n);
    Ok(order.chunks_exact(b).map(<[usize]>::to_vec).collect())
}

/// Augmented view `view` (0 or 1) of the given samples. Each sample draws
/// from its own stream keyed by `(seed, epoch, index, view)`.
pub fn view_batch(
    dataset: &LongTailDataset,
    indices: &[usize],
    policy: &AugmentationPolicy,
    seed: u64,
    epoch: u64,
    view: u64,
) -> Result<Matrix> {
    let mut data = Vec::with_capacity(indices.len() * dataset.dim());
    for &i in indices {
        let mut r = rng::stream(seed, &[rng::TAG_AUGMENT, epoch, i as u64, view]);
        data.extend(augment(policy, dataset.features().row(i), &mut r)?);
    }
    Matrix::from_vec(indices.len(), dataset.dim(), data)
}

pub fn batch_tau(spec: &TrainSpec, labels: &[usize], epoch: u64) -> Result<TauVector> {
    match &spec.coarse {
        Some(c) => per_anchor_tau(labels, c),
        None => TauVector::uniform(spec.schedule.tau_at(epoch), labels.len()),
    }
}

/// Loss and parameter gradients with the two views encoded by the same
/// network; gradients flow through both branches.
pub fn in_batch_loss_grad(
    params: &EncoderParams,
    x1: &Matrix,
    x2: &Matrix,
    tau: &TauVector,
    direction: Direction,
) -> Result<(LossBreakdown, EncoderParams, usize)> {
    let a = forward(params, x1)?;
    let b = forward(params, x2)?;
    let s = similarity_against(&a.embeddings, &b.embeddings)?;
    let (loss, g) = info_nce_with_grad(&s, tau, direction)?;
    let g = g.into_matrix();
    let du = g.matmul(&b.embeddings)?;
    let dv = g.t_matmul(&a.embeddings)?;
    let mut grads = backward_cached(params, &a, &du)?;
    let gb = backward_cached(params, &b, &dv)?;
    for (t, o) in grads.tensors_mut().into_iter().zip(gb.tensors()) {
        t.iter_mut().zip(o).for_each(|(x, y)| *x += y);
    }
    let degenerate = a.degenerate_rows.len() + b.degenerate_rows.len();
    Ok((loss, grads, degenerate))
}

/// Anchors from the query encoder against detached keys: the batch's own
/// key views (positives on the diagonal, other rows as extra negatives)
/// followed by the queue. Returns the batch keys for enqueueing.
pub fn queue_loss_grad(
    params: &EncoderParams,
    key_params: &EncoderParams,
    queued: &Matrix,
    x1: &Matrix,
    x2: &Matrix,
    tau: &TauVector,
) -> Result<(LossBreakdown, EncoderParams, Matrix, usize)> {
    let a = forward(params, x1)?;
    let k = forward(key_params, x2)?;
    let keys = if queued.rows() == 0 {
        k.embeddings.clone()
    } else {
        Matrix::vstack(&k.embeddings, queued)?
    };
    let s = similarity_against(&a.embeddings, &keys)?;
    let (loss, g) = info_nce_with_grad(&s, tau, Direction::Forward)?;
    let du = g.into_matrix().matmul(&keys)?;
    let grads = backward_cached(params, &a, &du)?;
    let degenerate = a.degenerate_rows.len() + k.degenerate_rows.len();
    Ok((loss, grads, k.embeddings, degenerate))
}

/// One pass over the dataset. Advances `state.epoch` to `epoch + 1`.
pub fn train_epoch(
    dataset: &LongTailDataset,
    params: &mut EncoderParams,
    state: &mut OptimState,
    negatives: &mut NegativeSource,
    spec: &TrainSpec,
    epoch: u64,
) -> Result<EpochStats> {
    let lr = lr_at(state, epoch)?;
    let batches = epoch_batches(dataset.len(), spec.batch_size, spec.seed, epoch)?;
    let mut total = 0.0;
    let mut degenerate_rows = 0;
    for idx in &batches {
        let x1 = view_batch(dataset, idx, &spec.policy, spec.seed, epoch, 0)?;
        let x2 = view_batch(dataset, idx, &spec.policy, spec.seed, epoch, 1)?;
        let labels: Vec<usize> = idx.iter().map(|&i| dataset.labels()[i]).collect();
        let tau = batch_tau(spec, &labels, epoch)?;
        let loss = match negatives {
            NegativeSource::InBatch => {
                let (loss, grads, deg) = in_batch_loss_grad(params, &x1, &x2, &tau, spec.direction)?;
                degenerate_rows += deg;
                sgd_step(params, &grads, state, lr)?;
                loss.mean
            }
            NegativeSource::MomentumQueue(q) => {
                let queued = q.negatives();
                let (loss, grads, keys, deg) = queue_loss_grad(params, &q.key_params, &queued, &x1, &x2, &tau)?;
                degenerate_rows += deg;
                sgd_step(params, &grads, state, lr)?;
                let m = q.momentum();
                momentum_update(params, &mut q.key_params, m)?;
                q.push(&keys)?;
                loss.mean
            }
        };
        if !loss.is_finite() || !params.is_finite() {
            return Err(Error::Divergence(format!("epoch {epoch}: loss {loss}")));
        }
        total += loss;
    }
    state.epoch = epoch + 1;
    Ok(EpochStats {
        epoch,
        mean_loss: total / batches.len() as f64,
        tau: spec.schedule.tau_at(epoch),
        lr,
        batches: batches.len(),
        degenerate_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SynthMixture;
    use crate::linalg::dot;

    fn spec(batch: usize, tau: f64) -> TrainSpec {
        TrainSpec {
            schedule: ScheduleConfig::constant(tau).unwrap(),
            coarse: None,
            policy: AugmentationPolicy::embedding_noise(0.1, 0.1).unwrap(),
            batch_size: batch,
            direction: Direction::Forward,
            seed: 11,
        }
    }

    fn toy() -> LongTailDataset {
        SynthMixture::new(4, 6, 3.0, 0.3, 5).unwrap().train_set(12, 4.0).unwrap()
    }

    #[test]
    fn batches_drop_remainder() {
        let b = epoch_batches(10, 4, 0, 0).unwrap();
        assert_eq!(b.len(), 2);
        assert!(b.iter().all(|x| x.len() == 4));
        assert_eq!(epoch_batches(10, 4, 0, 0).unwrap(), b);
        assert_ne!(epoch_batches(10, 4, 0, 1).unwrap(), b);
        assert_eq!(epoch_batches(3, 8, 0, 0).unwrap()[0].len(), 3);
        assert!(epoch_batches(10, 1, 0, 0).is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let ds = toy();
        let mut p = EncoderParams::init(6, &[8], &[4], 1).unwrap();
        let before = p.clone();
        let mut st = OptimState::new(&p, 0.0, 0, 5, 1e-4, 0.9).unwrap();
        let sp = spec(8, 0.5);
        let stats = train_epoch(&ds, &mut p, &mut st, &mut NegativeSource::in_batch(), &sp, 0).unwrap();
        assert_eq!(p, before);
        // Loss equals the loss evaluated directly on the same batches.
        let mut want = 0.0;
        let batches = epoch_batches(ds.len(), 8, sp.seed, 0).unwrap();
        for idx in &batches {
            let x1 = view_batch(&ds, idx, &sp.policy, sp.seed, 0, 0).unwrap();
            let x2 = view_batch(&ds, idx, &sp.policy, sp.seed, 0, 1).unwrap();
            let tau = TauVector::uniform(0.5, idx.len()).unwrap();
            want += in_batch_loss_grad(&before, &x1, &x2, &tau, Direction::Forward).unwrap().0.mean;
        }
        assert!((stats.mean_loss - want / batches.len() as f64).abs() < 1e-15);
        assert_eq!(st.epoch, 1);
    }

    #[test]
    fn bitwise_reproducible() {
        let ds = toy();
        let run = |queue: bool| {
            let mut p = EncoderParams::init(6, &[8], &[4], 2).unwrap();
            let mut st = OptimState::new(&p, 0.1, 1, 3, 1e-4, 0.9).unwrap();
            let mut src = if queue {
                NegativeSource::momentum_queue(&p, 16, 0.9).unwrap()
            } else {
                NegativeSource::in_batch()
            };
            let losses: Vec<f64> = (0..3)
                .map(|e| train_epoch(&ds, &mut p, &mut st, &mut src, &spec(8, 0.3), e).unwrap().mean_loss)
                .collect();
            (p, losses)
        };
        assert_eq!(run(false), run(false));
        assert_eq!(run(true), run(true));
        assert_ne!(run(false).0, run(true).0);
    }

    #[test]
    fn queue_fills_during_training() {
        let ds = toy();
        let mut p = EncoderParams::init(6, &[], &[4], 3).unwrap();
        let mut st = OptimState::new(&p, 0.05, 0, 2, 0.0, 0.0).unwrap();
        let mut src = NegativeSource::momentum_queue(&p, 10, 0.99).unwrap();
        let stats = train_epoch(&ds, &mut p, &mut st, &mut src, &spec(4, 0.2), 0).unwrap();
        let NegativeSource::MomentumQueue(q) = &src else { unreachable!() };
        assert_eq!(q.len(), (stats.batches * 4).min(10));
    }

    #[test]
    fn one_step_follows_finite_difference_descent() {
        let ds = SynthMixture::new(2, 5, 2.0, 0.4, 8).unwrap().sample(&[2, 2], 0).unwrap();
        let p0 = EncoderParams::init(5, &[6], &[3], 4).unwrap();
        let sp = spec(4, 0.5);
        let mut p = p0.clone();
        let mut st = OptimState::new(&p, 0.01, 0, 1, 0.0, 0.0).unwrap();
        train_epoch(&ds, &mut p, &mut st, &mut NegativeSource::in_batch(), &sp, 0).unwrap();
        let delta: Vec<f64> = p
            .tensors()
            .iter()
            .zip(p0.tensors())
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>())
            .collect();

        let idx = &epoch_batches(4, 4, sp.seed, 0).unwrap()[0];
        let x1 = view_batch(&ds, idx, &sp.policy, sp.seed, 0, 0).unwrap();
        let x2 = view_batch(&ds, idx, &sp.policy, sp.seed, 0, 1).unwrap();
        let tau = TauVector::uniform(0.5, 4).unwrap();
        let loss = |q: &EncoderParams| in_batch_loss_grad(q, &x1, &x2, &tau, Direction::Forward).unwrap().0.mean;
        let mut q = p0.clone();
        let mut fd = Vec::new();
        let sizes: Vec<usize> = p0.tensors().iter().map(|t| t.len()).collect();
        for (ti, len) in sizes.into_iter().enumerate() {
            for k in 0..len {
                let orig = q.tensors()[ti][k];
                q.tensors_mut()[ti][k] = orig + 1e-6;
                let lp = loss(&q);
                q.tensors_mut()[ti][k] = orig - 1e-6;
                let lm = loss(&q);
                q.tensors_mut()[ti][k] = orig;
                fd.push(-(lp - lm) / 2e-6);
            }
        }
        let cos = dot(&delta, &fd) / (dot(&delta, &delta).sqrt() * dot(&fd, &fd).sqrt());
        assert!(cos >= 0.999, "cosine {cos}");
    }
}
