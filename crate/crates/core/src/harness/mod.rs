//! Experiment orchestration: configuration, on-disk layout, the pipeline
//! commands and the comparison report.

mod commands;
mod config;
mod gradcheck;
mod report;
mod storage;

pub use commands::{
    cmd_collect, cmd_compare, cmd_meta_train, cmd_run, derive_seed, load_collect_manifest,
    load_datasets, load_model, load_run_inputs, run_episode, run_pipeline, select_reference,
    test_tasks, CollectManifest, ModelManifest, ReferenceFile, RunEntry, RunInputs, RunManifest,
};
pub use config::{ExperimentConfig, PlannerName, TestProtocol};
pub use gradcheck::{cmd_gradcheck, GradcheckReport};
pub use report::{ComparisonReport, PlannerSummary, ReportRow};
pub use storage::{read_columns, read_dataset, write_dataset, Layout};
