//! Scenario loading and end-to-end runs.

mod config;
mod run;

pub use config::{
    AttackConfig, BaselineConfig, Delivery, PartitionConfig, PartitionKind, ResolvedScenario, ScenarioConfig,
    ScheduleConfig,
};
pub use run::{metrics_csv, run_federation, ClientSummary, RoundMetrics, RunArtifacts, RunReport};
