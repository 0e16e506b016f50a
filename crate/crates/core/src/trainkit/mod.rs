//! Schedules, optimizer, training loops, checkpoints and evaluation.

mod adam;
mod checkpoint;
mod eval;
mod finetune;
mod metrics;
mod pretrain;
mod schedule;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CheckpointKind,
    CHECKPOINT_VERSION,
};
pub use eval::{evaluate, AccuracyRow, AccuracyTable, Condition};
pub use finetune::{finetune_probe, FinetuneConfig, FinetuneReport, ProbeModel, PROBE_PREFIX};
pub use metrics::{read_metrics, MetricsWriter};
pub use pretrain::{
    pretrain, PretrainConfig, Pretrainer, SamplePlan, StepMetrics, StudentLoss, TrainConfig, TrainState,
};
pub use schedule::{lr_at, lr_at_real, LrSchedule};
