//! Generator pretraining, single-stage joint training, multi-subject
//! training and adaptation, and inference.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod infer;
pub mod run;

pub use checkpoint::{read_trace, write_trace, CheckpointMeta, DecoderCheckpoint, Stage, TraceRow};
pub use config::{ModelConfig, Regime, ScheduleConfig, TrainConfig};
pub use data::{train_image_bank, ImageBank, TrainItem, TrainingSet};
pub use infer::{brain_tokens, infer, noise_stream, sample_unconditional, Provenance, Reconstruction};
pub use run::{
    adapt_new_subject, cond_dropout_draw, configure_trainable, init_adapt, init_generator, init_joint,
    pretrain_generator, stage_stream, step_stream, train_multi_subject, train_single_stage, trainer_for, Trainer,
    ADAPT_LR_SCALE,
};
