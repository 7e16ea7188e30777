//! Per-sample SGD with momentum and dev-driven annealing, curricula, the
//! teacher → distillation → fine-tune pipeline, and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod curriculum;
pub mod optim;
pub mod pipeline;
pub mod stage;

pub use checkpoint::{Checkpoint, Fingerprint};
pub use config::{Curriculum, CurriculumKind, Stage, TrainingConfig};
pub use curriculum::{curriculum_plan, Phase};
pub use optim::{sgd_momentum_step, EpochDecision, LrSchedule, StopReason};
pub use pipeline::{run_pipeline, run_pipeline_with, PipelineConfig, PipelineSummary};
pub use stage::{run_stage, run_stage_with, stage_fingerprint, Dataset, StageInputs, StageReport};
