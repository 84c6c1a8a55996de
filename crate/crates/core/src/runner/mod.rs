//! Experiment runner: configuration, toy tasks, orchestration, and plot-data
//! export.

pub mod config;
pub mod export;
pub mod run;
pub mod tasks;

pub use config::{MaskPolicyKind, RunConfig, StressCondition};
pub use export::{export_plot_data, ExportKind};
pub use run::{run_experiment, RunStatus, RunSummary, METRICS_HEADER};
pub use tasks::{builtin_tasks, TaskKind, ToyTask};
