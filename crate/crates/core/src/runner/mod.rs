//! Experiment driver: configuration, per-seed runs with task-level
//! checkpoints, and cross-run reports.

mod config;
mod driver;
mod report;

pub use config::{
    DataConfig, EvalConfig, EwcConfig, ExperimentConfig, GemConfig, MemoryConfig, MemorySelection, Method,
    ObjectiveConfig, Wiring, OUTPUT_ROOT_ENV,
};
pub use driver::{load_stream, run_experiment, RunManifest, SeedManifest, MANIFEST_FILE, METRICS_FILE};
pub use report::{average_rows, incompatible_keys, report, task_curves_svg, AvgRow, ReportOutput, AVG_F1_HEADER};
