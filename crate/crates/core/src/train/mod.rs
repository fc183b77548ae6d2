//! Optimizer, pretraining loop and checkpoints.

mod adam;
mod checkpoint;
mod pretrain;

pub use adam::{adam_step, adam_step_scaled, clip_grad_norm, AdamConfig, OptimState};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, NamedTensor};
pub use pretrain::{
    batch_indices, evaluate, mask_records, pairs_of, pretrain, EvalMetrics, RunFiles, StepRecord, TrainConfig,
    TrainReport,
};
