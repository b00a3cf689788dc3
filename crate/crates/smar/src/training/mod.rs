//! Optimizer, training loops, and checkpoint I/O.

pub mod adamw;
pub mod checkpoint;
pub mod trainer;

pub use adamw::{adamw_step, clip_global_norm, AdamWConfig, OptimState};
pub use checkpoint::{Checkpoint, Manifest, ParamEntry, Stage};
pub use trainer::{
    finetune, pretrain, Divergence, PreparedCorpus, StepLog, StepStats, TrainConfig, TrainRun,
    Trainer,
};
