//! Feedback-driven staged workflow engine.
//!
//! A designer model plans one stage at a time as a small DAG of operator
//! instances; the executor runs each stage in topological order against a
//! keyed, append-only memory, and the loop replans from the outcomes until the
//! designer terminates, an end condition holds, or the stage budget runs out.
//!
//! Around the loop: trajectory logs, SFT/preference dataset export, benchmark
//! grading with pass@k, token cost accounting, and a toy decision-process
//! simulator for the planning bounds.

pub mod bench;
pub mod config;
pub mod executor;
pub mod export;
pub mod graph;
pub mod planner;
pub mod prompts;
pub mod providers;
pub mod sandbox;
pub mod state;
pub mod theory;
pub mod trajectory;

pub use config::{EngineConfig, ProviderSet};
pub use executor::{run_task, RunConfig, RunProviders, RunResult};
pub use graph::{parse_plan, serialize_plan, topological_order, validate_subgraph, OperatorTemplate, StageSubgraph};
pub use state::{StopKind, StopReason, TaskSpec};
