//! Trace-driven simulator of an SRAM L1/L2 plus STTRAM last-level cache
//! hierarchy under magnetic or thermal attack, with stall, LLC bypass and
//! checkpoint-rollback mitigations.
//!
//! Runs are deterministic: a config, a trace and a seed fix every counter in
//! the report. A golden memory model tracks what each read should return,
//! so corrupted reads are counted rather than guessed.

pub mod attack;
pub mod cache;
pub mod config;
pub mod engine;
pub mod error;
pub mod golden;
pub mod hierarchy;
pub mod metrics;
pub mod mitigation;
pub mod physics;
pub mod sweep;
pub mod trace;

pub use config::RunConfig;
pub use engine::{simulate, Engine, EngineEvent, Observer};
pub use error::{Error, Result};
pub use metrics::{energy_overhead, normalized_slowdown, ReportFormat, SimReport};
pub use mitigation::PolicyKind;
pub use trace::Trace;
