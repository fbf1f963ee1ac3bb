//! End-to-end, greedy layer-wise, and incremental layer-wise pretraining.

mod optim;
mod plan;
mod schedule;
mod trainer;

pub use optim::{AdamConfig, OptimizerState};
pub use plan::{block_at, Block, PretrainPlan, Regime};
pub use schedule::{build_schedule, ScheduleKind, ScheduleShape};
pub use trainer::{block_rng, e2e_pretrain, StepMetrics, StepOutcome, Trainer};
