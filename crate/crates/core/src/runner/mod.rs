//! Experiment orchestration: configs, optimizers, training loops for every
//! method, embedding analysis, report files, and the CLI.

mod analysis;
mod cli;
mod config;
mod gradcheck;
mod optim;
mod report;
mod sweep;
mod train;

pub use analysis::{embedding_analysis, write_analysis, CheckpointAnalysis, EmbeddingAnalysis};
pub use cli::cli_main;
pub use config::{AlmSettings, ExperimentConfig, Method, ModelConfig, TrainingConfig};
pub use gradcheck::{gradient_check_suite, GradCheckCase};
pub use optim::{AdamW, NoamSchedule};
pub use report::{
    aggregate_reports, report_json, write_results_table, write_run_outputs, AlmEpochRow,
    CheckpointMeta, EpochRow, MethodReport, OodMetrics, ResultsRow, ResultsTable, RunRecord,
    SelectedCheckpoint,
};
pub use sweep::{grid_search, SweepEntry};
pub use train::{evaluate, fit, run_experiment, FitOutcome};
