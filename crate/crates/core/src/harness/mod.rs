//! Experiment configuration, synthetic datasets and the end-to-end pipeline.

mod config;
mod data;
mod pipeline;
mod report;

pub use config::{load_config, ExperimentConfig, MemberConfig, SharingMode};
pub use data::{gen_dataset, read_raw_array, Dataset, DatasetKind, DatasetSpec, RawArrayMeta, Split};
pub use pipeline::{
    cluster_within_budget,
    interpolation_curve, plan_sha256, run_experiment, search_stage, Budget, BudgetReport, EpochRecord,
    ExperimentReport, ExperimentResult, InterpolationPoint, SearchOutcome,
};
pub use report::{emit_report, run_and_emit, RunSummary};
