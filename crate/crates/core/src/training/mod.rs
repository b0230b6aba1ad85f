//! Masking, learning-rate schedule, optimizer and the staged trainer.

pub mod checkpoint;
pub mod masking;
pub mod optim;
pub mod schedule;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use masking::{mask_batch, mask_example, MaskRecord, MaskingConfig, Regime};
pub use optim::{AdamW, AdamWConfig};
pub use schedule::ScheduleConfig;
pub use trainer::{
    keep_going, make_batch, multitask_train, pretrain_linker, Control, LinkerStatus, Phase, PhaseSummary, Progress, Session, Source, Stages,
    StepRecord, TrainConfig, TrainData, TrainingBatch,
};
