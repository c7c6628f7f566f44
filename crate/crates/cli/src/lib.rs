//! Library surface of the `multicsr` CLI: pipeline config, stage runners,
//! and the run-all orchestration. The binary in `main.rs` is a thin
//! argument-parsing wrapper, so integration tests drive the same code paths.

pub mod config;
pub mod stages;

pub use config::{Overrides, Paths, PipelineConfig, ReferenceConfig, SweepConfig};
pub use stages::{run_all, run_stage, run_sweep, Stage, StageError, StageSummary, SweepKind};
