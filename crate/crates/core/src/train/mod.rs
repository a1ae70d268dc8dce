//! Training orchestration, optimization, and checkpointing.

pub mod checkpoint;
pub mod optim;
pub mod run_config;
pub mod trainer;

pub use checkpoint::{Checkpoint, Payload, Record};
pub use optim::{AdamW, ParamGroup};
pub use run_config::RunConfig;
pub use trainer::{
    load_model_params, load_priors_into, pretrain_priors, save_checkpoint, train, Counters,
    EpochRow, LoadReport, TrainOutcome,
};
