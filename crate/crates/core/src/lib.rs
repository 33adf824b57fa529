//! Contrastive learning with temperature schedules on long-tail data.
//!
//! The crate is organised around the pieces of one experiment:
//!
//! - [`loss`]: InfoNCE in similarity and distance form, with gradients.
//! - [`schedule`]: temperature as a function of the epoch.
//! - [`data`]: long-tail datasets, CIFAR ingestion, augmentation.
//! - [`encoder`]: a small MLP encoder trained by manual backprop.
//! - [`eval`]: kNN and linear-probe evaluation with head/mid/tail breakdowns.
//! - [`analysis`]: embedding-space diagnostics.
//! - [`config`] and [`experiment`]: the configuration-driven runner.

pub mod analysis;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod linalg;
pub mod loss;
pub mod parallel;
pub mod rng;
pub mod schedule;

pub use error::{Error, Result};
pub use linalg::Matrix;
