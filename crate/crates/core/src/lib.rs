//! Deterministic simulator for a two-tier (local DRAM + CXL) memory system
//! shared by several containers.
//!
//! Each container gets a lower protection (local memory shielded from its
//! neighbours' pressure) and an optional upper bound. Demotion scans
//! containers in proportion to how far they are over protection, promotion
//! is throttled for containers over protection, and a sampled thrash
//! detector backs off promotion for containers stuck in promote/demote
//! cycles.

pub mod demotion;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod promotion;
pub mod scenario;
pub mod sim;
pub mod thrash;
pub mod workload;

pub use memory::{MemError, MemoryManager, WatermarkState};
pub use metrics::{ExportFormat, MetricsSnapshot, RunHeader};
pub use model::{
    validate_config, ConfigError, Container, ContainerId, ContainerSpec, MachineConfig, Multiplier, PageId, Policy,
    Tick, Tier,
};
pub use scenario::{parse_scenario, parse_scenario_str, Scenario, ScenarioError};
pub use sim::{run, run_and_export, RunResult, RunSummary, Simulation};
pub use workload::{WorkloadKind, WorkloadSpec};
