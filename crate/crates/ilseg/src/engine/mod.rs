//! Stage orchestration: curriculum plans, per-stage training, the
//! distribution-shift study, and report rendering.

pub mod config;
pub mod data;
pub mod plan;
pub mod report;
pub mod shift;
mod strategy;
pub mod train;

pub use config::{ExperimentPlan, GeneratePlan, ShiftStudyConfig, StageConfig};
pub use plan::{run_plan, PlanOutcome};
pub use report::render_report;
pub use shift::{run_shift_study, ShiftStudyTable};
pub use strategy::Strategy;
pub use train::{train_stage, TrainOutcome};
