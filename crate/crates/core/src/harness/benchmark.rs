//! Replicated simulation runs with an append-only checkpoint log.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::metrics::MetricsTable;
use super::pipeline::{derive_seed, estimate_dataset, mix_seed, Reference};
use crate::env::simulate_dataset;
use crate::estimators::ValueEstimate;
use crate::{Error, Result};

/// Outcome of one replication; `error` is set when the pipeline failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub index: usize,
    pub seed: u64,
    pub estimates: Vec<ValueEstimate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Seed of replication `index`, independent of scheduling.
pub fn replication_seed(base_seed: u64, index: usize) -> u64 {
    mix_seed(base_seed ^ mix_seed(index as u64 ^ 0xA5A5_0000_0000_0000))
}

/// Simulates and estimates replication `index`. Pipeline errors are
/// captured in the record.
pub fn run_replication(config: &ExperimentConfig, index: usize) -> ReplicationRecord {
    let seed = replication_seed(config.base_seed, index);
    let attempt = || -> Result<Vec<ValueEstimate>> {
        let target = config.policy.resolve()?;
        let data = simulate_dataset(&config.env, &config.behavior, config.n, config.horizon, derive_seed(seed, 0))?;
        let reference = Reference::resolve(&config.reference, Some(&config.env), &data)?;
        let out = estimate_dataset(&data, &target, Some(&config.behavior), &reference, &config.settings, derive_seed(seed, 10))?;
        Ok(out.estimates)
    };
    match attempt() {
        Ok(estimates) => ReplicationRecord { index, seed, estimates, error: None },
        Err(e) => {
            log::warn!("replication {index} failed: {e}");
            ReplicationRecord { index, seed, estimates: Vec::new(), error: Some(e.to_string()) }
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct BenchmarkOptions {
    /// JSON-lines log of finished replications; existing entries are reused.
    pub checkpoint: Option<PathBuf>,
    /// Run at most this many new replications (for staged runs).
    pub limit: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct BenchmarkResult {
    /// Sorted by replication index.
    pub records: Vec<ReplicationRecord>,
    /// `None` until every replication has a record.
    pub table: Option<MetricsTable>,
}

/// Reads a checkpoint log, checking that every record belongs to `config`.
pub fn read_checkpoint(path: &Path, config: &ExperimentConfig) -> Result<BTreeMap<usize, ReplicationRecord>> {
    let mut out = BTreeMap::new();
    if !path.exists() {
        return Ok(out);
    }
    for (line_no, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ReplicationRecord = match serde_json::from_str(&line) {
            Ok(rec) => rec,
            Err(e) => {
                // A torn final line from an interrupted write is dropped.
                log::warn!("ignoring unreadable checkpoint line {}: {e}", line_no + 1);
                continue;
            }
        };
        if rec.index >= config.replications || rec.seed != replication_seed(config.base_seed, rec.index) {
            return Err(Error::Schema(format!(
                "checkpoint line {} does not belong to this configuration",
                line_no + 1
            )));
        }
        out.insert(rec.index, rec);
    }
    Ok(out)
}

/// Runs the missing replications in parallel and aggregates against `truth`.
pub fn run_benchmark(config: &ExperimentConfig, truth: f64, options: &BenchmarkOptions) -> Result<BenchmarkResult> {
    config.validate()?;
    let mut done = match &options.checkpoint {
        Some(path) => read_checkpoint(path, config)?,
        None => BTreeMap::new(),
    };
    let mut pending: Vec<usize> = (0..config.replications).filter(|i| !done.contains_key(i)).collect();
    if let Some(limit) = options.limit {
        pending.truncate(limit);
    }
    let log = match &options.checkpoint {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            Some(Mutex::new(OpenOptions::new().create(true).append(true).open(path)?))
        }
        None => None,
    };
    let fresh: Vec<ReplicationRecord> = pending
        .par_iter()
        .map(|&i| -> Result<ReplicationRecord> {
            let rec = run_replication(config, i);
            if let Some(log) = &log {
                let line = serde_json::to_string(&rec)?;
                let mut file = log.lock().expect("checkpoint lock");
                writeln!(file, "{line}")?;
                file.flush()?;
            }
            Ok(rec)
        })
        .collect::<Result<_>>()?;
    for rec in fresh {
        done.insert(rec.index, rec);
    }
    let records: Vec<ReplicationRecord> = done.into_values().collect();
    let table = if records.len() == config.replications {
        if records.iter().all(|r| r.error.is_some()) {
            return Err(Error::AllReplicationsFailed(records.len()));
        }
        let methods: Vec<String> = config.settings.estimators.iter().map(|k| k.name().to_string()).collect();
        Some(MetricsTable::from_records(&records, truth, &methods)?)
    } else {
        None
    };
    Ok(BenchmarkResult { records, table })
}
