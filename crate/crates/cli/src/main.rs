use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use balancing_ope::dataset::{import_dataset, CsvSchema, Dataset, RaggedPolicy};
use balancing_ope::env::simulate_dataset;
use balancing_ope::harness::{
    cached_truth, compute_truth, derive_seed, diagnose, estimate_dataset, run_benchmark, write_outputs, BenchmarkOptions,
    EstimatorKind, ExperimentConfig, Reference, ReferenceSpec, TargetChoice,
};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "bope", version, about = "Off-policy evaluation with projected balancing weights")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute (and cache) the true value of the configured target policy.
    Truth {
        #[command(flatten)]
        common: Common,
        /// JSON file mapping experiment keys to truths.
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Simulate one dataset from the configured environment and write it as CSV.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Run the estimation pipeline on a dataset and print the estimates as JSON.
    Estimate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        input: DatasetInput,
        /// Comma-separated estimator names (proposed, balance, ql, aug, fqe, is).
        #[arg(long, value_delimiter = ',')]
        estimators: Option<Vec<EstimatorKind>>,
    },
    /// Run replicated simulations and write metrics.csv, metrics.json and manifest.json.
    Benchmark {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long, default_value = "results")]
        out: PathBuf,
        /// JSON-lines replication log; an existing log is resumed.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Run at most this many new replications.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        truth_cache: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        estimators: Option<Vec<EstimatorKind>>,
        /// Worker threads (defaults to the number of CPUs).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Report tuning selections and balance diagnostics as JSON.
    Diagnose {
        #[command(flatten)]
        common: Common,
        /// Dataset to diagnose; simulated from the configuration when absent.
        #[command(flatten)]
        input: OptionalDataset,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON); built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Target policy id (1-4).
    #[arg(long)]
    policy: Option<u32>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReferenceArg {
    /// Initial-state distribution of the configured environment.
    Env,
    /// Initial states observed in the dataset.
    Empirical,
}

#[derive(Args)]
struct DatasetInput {
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    format: DatasetFormat,
}

#[derive(Args)]
struct OptionalDataset {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[command(flatten)]
    format: DatasetFormat,
}

#[derive(Args)]
struct DatasetFormat {
    #[arg(long, default_value_t = 2)]
    num_actions: usize,
    /// Cut ragged trajectories to the shortest length instead of failing.
    #[arg(long)]
    truncate: bool,
    #[arg(long, value_enum)]
    reference: Option<ReferenceArg>,
}

impl DatasetFormat {
    fn load(&self, path: &Path) -> anyhow::Result<Dataset> {
        let schema = CsvSchema {
            state_dim: None,
            num_actions: self.num_actions,
            ragged: if self.truncate { RaggedPolicy::Truncate } else { RaggedPolicy::Reject },
        };
        import_dataset(path, &schema).with_context(|| format!("reading {}", path.display()))
    }

    fn apply(&self, config: &mut ExperimentConfig) {
        match self.reference {
            Some(ReferenceArg::Env) => config.reference = ReferenceSpec::EnvInitial,
            Some(ReferenceArg::Empirical) => config.reference = ReferenceSpec::Empirical,
            None => {}
        }
    }
}

impl Common {
    fn config(&self) -> anyhow::Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(id) = self.policy {
            config.policy = TargetChoice::Id(id);
        }
        if let Some(gamma) = self.gamma {
            config.settings.gamma = gamma;
        }
        if let Some(seed) = self.seed {
            config.base_seed = seed;
        }
        config.validate()?;
        Ok(config)
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{}", serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Truth { common, cache } => {
            let config = common.config()?;
            let truth = match cache {
                Some(path) => cached_truth(&config, &path)?,
                None => compute_truth(&config)?,
            };
            print_json(&truth)
        }
        Command::Simulate { common, out, n, horizon } => {
            let mut config = common.config()?;
            config.n = n.unwrap_or(config.n);
            config.horizon = horizon.unwrap_or(config.horizon);
            config.validate()?;
            let data = simulate_dataset(&config.env, &config.behavior, config.n, config.horizon, config.base_seed)?;
            data.export_csv(&out)?;
            log::info!("wrote {} transitions to {}", data.len(), out.display());
            Ok(())
        }
        Command::Estimate { common, input, estimators } => {
            let mut config = common.config()?;
            input.format.apply(&mut config);
            if let Some(list) = estimators {
                config.settings.estimators = list;
            }
            config.validate()?;
            let data = input.format.load(&input.dataset)?;
            let target = config.policy.resolve()?;
            let reference = Reference::resolve(&config.reference, Some(&config.env), &data)?;
            let out = estimate_dataset(
                &data,
                &target,
                Some(&config.behavior),
                &reference,
                &config.settings,
                derive_seed(config.base_seed, 10),
            )?;
            print_json(&out.estimates)
        }
        Command::Benchmark { common, reps, out, checkpoint, limit, truth_cache, estimators, threads } => {
            let mut config = common.config()?;
            if let Some(reps) = reps {
                config.replications = reps;
            }
            if let Some(list) = estimators {
                config.settings.estimators = list;
            }
            config.validate()?;
            if let Some(threads) = threads {
                rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()?;
            }
            let truth = match truth_cache {
                Some(path) => cached_truth(&config, &path)?,
                None => compute_truth(&config)?,
            };
            log::info!("truth {:.6} (se {:.2e})", truth.value, truth.std_error);
            let options = BenchmarkOptions { checkpoint, limit };
            let result = run_benchmark(&config, truth.value, &options)?;
            write_outputs(&out, &config, &truth, &result)?;
            match &result.table {
                Some(table) => print!("{}", table.render()),
                None => println!("{} of {} replications done", result.records.len(), config.replications),
            }
            Ok(())
        }
        Command::Diagnose { common, input } => {
            let mut config = common.config()?;
            input.format.apply(&mut config);
            config.validate()?;
            let data = match &input.dataset {
                Some(path) => input.format.load(path)?,
                None => {
                    let seed = derive_seed(config.base_seed, 0);
                    simulate_dataset(&config.env, &config.behavior, config.n, config.horizon, seed)?
                }
            };
            let target = config.policy.resolve()?;
            let reference = Reference::resolve(&config.reference, Some(&config.env), &data)?;
            let report = diagnose(&data, &target, &reference, &config.settings, derive_seed(config.base_seed, 10))?;
            print_json(&report)
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
