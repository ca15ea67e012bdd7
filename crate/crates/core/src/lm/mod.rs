//! Small decoder-only language model used for routers, experts and the dense baseline.

mod checkpoint;
mod config;
mod model;
mod optim;
mod params;
mod real;
mod schedule;
mod trainer;

pub use checkpoint::{read_checkpoint, read_optimizer, write_checkpoint, write_optimizer};
pub use config::ModelConfig;
pub use model::LogProbs;
pub use optim::{
    adamw_update, clip_grad, global_norm, train_step, AdamWConfig, LossKind, OptimizerState, StepStats,
};
pub use params::{Layout, ModelParams, TensorEntry};
pub use real::{gemm, matmul, MatRef, Real};
pub use schedule::{ScheduleConfig, ScheduleKind};
pub use trainer::{run_steps, BatchSampler, CurvePoint, LoopConfig};
