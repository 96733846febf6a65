//! Optimization loop, checkpoints and cross-validation.

mod checkpoint;
mod cv;
mod fold;
mod optim;

pub use checkpoint::{config_hash, Checkpoint, CHECKPOINT_VERSION, MAGIC};
pub use cv::{mean_sem, run_cv, CvResult, FoldResult, MetricSummary, SectionReports};
pub use fold::{
    score_split, train_fold, BestSnapshot, EpochLog, Split, TrainConfig, TrainState, Trainer,
};
pub use optim::{clip_global_norm, AdamW, Plateau};
