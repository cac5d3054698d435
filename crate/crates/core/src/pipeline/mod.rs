//! Experiment orchestration.

pub mod bt;
pub mod config;
pub mod family;
pub mod stages;
pub mod store;

pub use bt::{generate_synthetic, metric_table_tsv, parity_frozen, run_iteration, run_plan, BtData, BtPlan, MetricRow, PlanReport, SyntheticCorpus, TestSet};
pub use stages::{verify_stage_isolation, IsolationReport, Stage, StageManifest, Violation};
pub use store::{ArtifactStore, PipelineLock};
pub use config::{BtSettings, ExperimentConfig};
