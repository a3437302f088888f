//! True policy values, with an on-disk cache.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, ReferenceSpec, TruthSpec};
use crate::env::{monte_carlo_truth, EnvSpec};
use crate::tabular::exact_policy_value;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthValue {
    pub value: f64,
    /// Monte Carlo standard error; 0 for exact or fixed values.
    pub std_error: f64,
    pub source: TruthSpec,
}

pub fn compute_truth(config: &ExperimentConfig) -> Result<TruthValue> {
    let policy = config.policy.resolve()?;
    let gamma = config.settings.gamma;
    let (value, std_error) = match (&config.truth, &config.env) {
        (TruthSpec::Fixed { value }, _) => (*value, 0.0),
        (TruthSpec::Exact, EnvSpec::Tabular(mdp)) => {
            let reference = match &config.reference {
                ReferenceSpec::EnvInitial => mdp.initial.clone(),
                ReferenceSpec::Discrete { support } => {
                    let mut g = vec![0.0; mdp.num_states];
                    for (s, p) in support {
                        g[crate::env::tabular_index(s).min(mdp.num_states - 1)] += p;
                    }
                    g
                }
                other => return Err(Error::InvalidArgument(format!("exact truth does not support reference {other:?}"))),
            };
            (exact_policy_value(mdp, &policy, gamma, &reference)?, 0.0)
        }
        (TruthSpec::Exact, _) => return Err(Error::InvalidArgument("exact truth needs a tabular environment".into())),
        (TruthSpec::MonteCarlo { n_paths, horizon, seed }, env) => {
            if config.reference != ReferenceSpec::EnvInitial {
                return Err(Error::InvalidArgument("Monte Carlo truth starts from the environment's initial distribution".into()));
            }
            let mc = monte_carlo_truth(env, &policy, gamma, *n_paths, *horizon, *seed)?;
            (mc.value, mc.std_error)
        }
    };
    Ok(TruthValue { value, std_error, source: config.truth.clone() })
}

/// Cache key: everything the truth depends on.
pub fn truth_key(config: &ExperimentConfig) -> Result<String> {
    let key = serde_json::json!({
        "env": config.env,
        "policy": config.policy.resolve()?,
        "gamma": config.settings.gamma,
        "reference": config.reference,
        "truth": config.truth,
    });
    Ok(serde_json::to_string(&key)?)
}

/// Looks the truth up in the JSON cache at `path`, computing and storing
/// it on a miss.
pub fn cached_truth(config: &ExperimentConfig, path: &Path) -> Result<TruthValue> {
    let mut cache: BTreeMap<String, TruthValue> =
        if path.exists() { serde_json::from_str(&std::fs::read_to_string(path)?)? } else { BTreeMap::new() };
    let key = truth_key(config)?;
    if let Some(hit) = cache.get(&key) {
        return Ok(hit.clone());
    }
    let truth = compute_truth(config)?;
    cache.insert(key, truth.clone());
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(&cache)?)?;
    Ok(truth)
}
