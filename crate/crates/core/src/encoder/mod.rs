//! MLP encoder onto the unit sphere, trained with SGD under in-batch or
//! momentum-queue negatives.

pub mod checkpoint;
pub mod network;
pub mod optim;
pub mod queue;
pub mod train;

pub use checkpoint::{load_checkpoint, parse_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use network::{backward, backward_cached, eval_features, forward, EncoderParams, ForwardOutput, Linear};
pub use optim::{lr_at, momentum_update, sgd_step, OptimState};
pub use queue::{queue_negatives, queue_push, MomentumQueue, NegativeSource};
pub use train::{batch_tau, epoch_batches, train_epoch, view_batch, EpochStats, TrainSpec};
