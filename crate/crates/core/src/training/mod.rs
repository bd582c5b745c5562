//! Configuration, the distillation trainer, fine-tuning baselines,
//! checkpoints and metric logs.

mod checkpoint;
mod config;
mod log;
mod pipeline;
mod trainer;

pub use checkpoint::{denoiser_checkpoint, Checkpoint, MAGIC, VERSION};
pub use config::*;
pub use log::{
    metrics_csv, parse_metrics_csv, write_metrics_csv, LossSnapshot, MetricRow, CSV_HEADER,
};
pub use pipeline::{
    fine_tune_student, pretrain_source, pretrain_source_logged, run_pipeline, train_denoiser,
    train_distillation, Evaluator, Generator, PipelineInputs, PipelineOutput, TimestepDraw,
};
pub use trainer::{
    GradPresence, Models, Optimizers, RealSource, StepDraws, StepReport, SubStep, TrainerState,
    WarmStart,
};
