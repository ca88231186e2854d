//! The multi-head continual model, its staged trainer, the task-sequence
//! runner and checkpoints.

mod checkpoint;
mod model;
mod runner;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use model::{
    Architecture, Block, ContinualModel, Gradients, HeadInit, MomentMode, NormLayer, NormMode, Stage, Trace,
};
pub use runner::{continual_run, RunState, RunSummary};
pub use train::{
    evaluate, pretrain, train_task, EpochLoss, ScheduleMode, StageSchedule, TrainConfig, TrainLog, PRETEXT_TASK,
};
