//! Configuration-driven experiments: simulation, the end-to-end pipeline,
//! replicated benchmarks and persisted results.

mod benchmark;
mod config;
mod metrics;
mod pipeline;
mod truth;

use std::path::Path;

use serde::Serialize;

pub use benchmark::{
    read_checkpoint, replication_seed, run_benchmark, run_replication, BenchmarkOptions, BenchmarkResult, ReplicationRecord,
};
pub use config::{BasisChoice, EstimationSettings, EstimatorKind, ExperimentConfig, ReferenceSpec, TargetChoice, TruthSpec};
pub use metrics::{MetricsRow, MetricsTable};
pub use pipeline::{
    derive_seed, diagnose, estimate_dataset, expanded_dimension_check, mix_seed, BalancingFit, DiagnoseReport,
    ExpandedDimensionCheck, PipelineOutput, Reference,
};
pub use truth::{cached_truth, compute_truth, truth_key, TruthValue};

use crate::Result;

#[derive(Serialize)]
struct Manifest<'a> {
    package: &'static str,
    version: &'static str,
    config: &'a ExperimentConfig,
    truth: &'a TruthValue,
    replication_seeds: Vec<u64>,
    failed_replications: Vec<usize>,
}

/// Writes `metrics.csv`, `metrics.json` and `manifest.json` into `dir`.
pub fn write_outputs(dir: &Path, config: &ExperimentConfig, truth: &TruthValue, result: &BenchmarkResult) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    if let Some(table) = &result.table {
        table.write_csv(std::fs::File::create(dir.join("metrics.csv"))?)?;
        std::fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(table)?)?;
    }
    let manifest = Manifest {
        package: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        config,
        truth,
        replication_seeds: result.records.iter().map(|r| r.seed).collect(),
        failed_replications: result.records.iter().filter(|r| r.error.is_some()).map(|r| r.index).collect(),
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}
