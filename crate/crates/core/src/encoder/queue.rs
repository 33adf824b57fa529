use std::collections::VecDeque;

use super::network::EncoderParams;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::loss::check_unit_rows;

/// FIFO dictionary of past key embeddings plus the momentum key encoder.
#[derive(Debug, Clone)]
pub struct MomentumQueue {
    entries: VecDeque<Vec<f64>>,
    capacity: usize,
    momentum: f64,
    dim: usize,
    pub key_params: EncoderParams,
}

#[derive(Debug, Clone)]
pub enum NegativeSource {
    InBatch,
    MomentumQueue(MomentumQueue),
}

impl NegativeSource {
    pub fn in_batch() -> Self {
        NegativeSource::InBatch
    }

    /// Momentum source whose key encoder starts as a copy of `params`.
    pub fn momentum_queue(params: &EncoderParams, capacity: usize, momentum: f64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("queue capacity must be positive".into()));
        }
        if !(momentum > 0.0 && momentum <= 1.0) {
            return Err(Error::Config(format!("momentum must lie in (0, 1], got {momentum}")));
        }
        Ok(NegativeSource::MomentumQueue(MomentumQueue {
            entries: VecDeque::with_capacity(capacity),
            capacity,
            momentum,
            dim: params.embed_dim(),
            key_params: params.clone(),
        }))
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            NegativeSource::InBatch => "in_batch",
            NegativeSource::MomentumQueue(_) => "momentum_queue",
        }
    }
}

impl MomentumQueue {
    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, keys: &Matrix) -> Result<()> {
        if keys.cols() != self.dim {
            return Err(Error::Shape(format!("keys have width {}, queue holds {}", keys.cols(), self.dim)));
        }
        check_unit_rows(keys)?;
        for row in keys.row_iter() {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back(row.to_vec());
        }
        Ok(())
    }

    /// Current contents, oldest first.
    pub fn negatives(&self) -> Matrix {
        let data: Vec<f64> = self.entries.iter().flatten().copied().collect();
        Matrix::from_vec(self.entries.len(), self.dim, data).expect("queue rows share a width")
    }
}

pub fn queue_push(source: &mut NegativeSource, keys: &Matrix) -> Result<()> {
    match source {
        NegativeSource::MomentumQueue(q) => q.push(keys),
        NegativeSource::InBatch => Err(Error::InvalidInput("in-batch source has no queue".into())),
    }
}

/// Queue contents in age order; empty for the in-batch source.
pub fn queue_negatives(source: &NegativeSource) -> Option<Matrix> {
    match source {
        NegativeSource::MomentumQueue(q) => Some(q.negatives()),
        NegativeSource::InBatch => None,
    }
}
