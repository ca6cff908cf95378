//! JSON run configuration. Every section is optional; command-line flags
//! override file values, and `GRK_SEED` overrides the file's seed.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::CliError;

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: Option<u32>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub check: CheckSection,
    #[serde(default)]
    pub bench: BenchSection,
    #[serde(default)]
    pub varmap: VarmapSection,
    #[serde(default)]
    pub decompose: DecomposeSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub qp: QpSection,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckSection {
    pub tau: Option<Vec<f64>>,
    pub jacobian_tolerance: Option<f64>,
    pub replicates: Option<u64>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    pub n: Option<usize>,
    pub theta: Option<Vec<f64>>,
    pub objective_seed: Option<u64>,
    pub estimators: Option<Vec<String>>,
    pub tau: Option<Vec<f64>>,
    pub k: Option<Vec<usize>>,
    pub b: Option<Vec<usize>>,
    pub replicates: Option<u64>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VarmapSection {
    pub n: Option<usize>,
    pub estimators: Option<Vec<String>>,
    pub tau: Option<Vec<f64>>,
    pub resolution: Option<usize>,
    pub margin: Option<f64>,
    pub replicates: Option<u64>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecomposeSection {
    pub theta: Option<Vec<f64>>,
    /// `"random"` (seeded quadratic) or `"constant"`.
    pub objective: Option<String>,
    pub objective_seed: Option<u64>,
    pub tau: Option<Vec<f64>>,
    pub k: Option<Vec<usize>>,
    pub b: Option<Vec<usize>>,
    pub replicates: Option<u64>,
    pub conditional_draws: Option<usize>,
    pub k_ref: Option<usize>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub n: Option<usize>,
    pub estimators: Option<Vec<String>>,
    pub tau: Option<Vec<f64>>,
    pub lr: Option<Vec<f64>>,
    pub iters: Option<usize>,
    pub seeds: Option<u64>,
    pub b: Option<Vec<usize>>,
    pub theta0: Option<Vec<f64>>,
    /// Offsets above the optimum `v*` at which iterations are counted.
    pub thresholds: Option<Vec<f64>>,
    pub include_a_path: Option<bool>,
}

/// QP data; defaults to `Q_ij = exp(-2|i-j|)`, `c_i = 1/3`.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QpSection {
    pub q: Option<Vec<Vec<f64>>>,
    pub c: Option<Vec<f64>>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
        let config: RunConfig =
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?;
        if let Some(v) = config.version {
            if v != 1 {
                return Err(CliError::Usage(format!("unsupported config version {v}")));
            }
        }
        Ok(config)
    }
}

pub fn validate_taus(taus: &[f64]) -> Result<(), CliError> {
    if taus.is_empty() {
        return Err(CliError::Usage("at least one temperature is required".into()));
    }
    if let Some(bad) = taus.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
        return Err(CliError::Usage(format!("temperature must be positive and finite, got {bad}")));
    }
    Ok(())
}

pub fn validate_counts(name: &str, values: &[usize]) -> Result<(), CliError> {
    if values.is_empty() || values.contains(&0) {
        return Err(CliError::Usage(format!("{name} values must be nonempty and at least 1")));
    }
    Ok(())
}

pub fn validate_positive(name: &str, value: u64) -> Result<(), CliError> {
    if value == 0 {
        return Err(CliError::Usage(format!("{name} must be at least 1")));
    }
    Ok(())
}
