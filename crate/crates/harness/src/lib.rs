//! Batch experiment harness: dataset adapters, manifests, resumable runs,
//! metric reports and call statistics.

pub mod dataset;
mod jsonl;
pub mod manifest;
pub mod report;
pub mod runner;

pub use dataset::{ingest, Adapter, DatasetSample, TaskKind};
pub use jsonl::read_jsonl;
pub use manifest::Manifest;
pub use report::{build_report, call_stats, CallStats, Report};
pub use runner::{run_experiment, ResultRecord, RunSummary};
