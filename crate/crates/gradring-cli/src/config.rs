//! Experiment configuration loading and precedence resolution.
//!
//! Configuration is a single JSON file with flat sections: `run` (the
//! simulator run), `memory` (capacity gate inputs), and `out` (output
//! path). Command-line flags override file values; the `GRADRING_SEED`
//! environment variable is the lowest-precedence seed source, below both
//! the `--seed` flag and a seed present in the file.

use std::fs;
use std::path::{Path, PathBuf};

use gradring_core::strategies::RunConfig;
use serde::Deserialize;
use serde_json::{json, Value};

pub const SEED_ENV: &str = "GRADRING_SEED";

/// Inputs to the per-worker memory gate. The gate only runs when a
/// capacity is configured.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemorySection {
    pub capacity_bytes: Option<u64>,
    /// Model-input elements for the whole global batch.
    #[serde(default)]
    pub input_elements: u64,
    /// Per-sample output-size imbalance, in elements.
    #[serde(default)]
    pub skew_elements: u64,
    /// Fixed per-worker engineering overhead, in bytes.
    #[serde(default)]
    pub overhead_bytes: u64,
}

/// Flag-level overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub strategy: Option<String>,
    pub precision: Option<String>,
    pub nodes: Option<usize>,
    pub gpus_per_node: Option<usize>,
    pub batch_per_worker: Option<usize>,
    pub steps: Option<u64>,
}

#[derive(Debug)]
pub struct Experiment {
    pub run: RunConfig,
    pub memory: MemorySection,
    pub out: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Invalid(String),
}

/// Baseline values used when the config file omits a field entirely: a
/// single-worker desk-scale run.
pub fn default_run_value() -> Value {
    json!({
        "strategy": "baseline",
        "precision": { "mode": "fp32" },
        "cluster": gradring_core::netsim::ClusterSpec::calibrated(1, 1),
        "model": gradring_core::nn::ModelConfig::desk(),
        "optimizer": { "kind": "sgd", "learning_rate": 0.1 },
        "per_worker_batch": 2,
        "seq_len": 8,
        "steps": 50,
        "seed": 0u64,
    })
}

pub fn load_file(path: &Path) -> Result<Value, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_owned(),
        source,
    })?;
    let value: Value = serde_json::from_str(&text)?;
    if !value.is_object() {
        return Err(ConfigError::Invalid(
            "config root must be a JSON object".into(),
        ));
    }
    Ok(value)
}

fn env_seed() -> Result<Option<u64>, ConfigError> {
    match std::env::var(SEED_ENV) {
        Ok(raw) => raw.trim().parse::<u64>().map(Some).map_err(|_| {
            ConfigError::Invalid(format!("{SEED_ENV} must be an unsigned integer, got {raw:?}"))
        }),
        Err(_) => Ok(None),
    }
}

/// Shallow-merges the given `run` sections (later wins per top-level key)
/// over the defaults, applies flag overrides, resolves the seed with
/// precedence flag > file > environment > 0, and type-checks the result.
pub fn resolve_run(sections: &[&Value], ov: &Overrides) -> Result<RunConfig, ConfigError> {
    let mut run = default_run_value();
    let mut file_seed: Option<u64> = None;
    for section in sections {
        let map = section.as_object().ok_or_else(|| {
            ConfigError::Invalid("run section must be a JSON object".into())
        })?;
        for (key, value) in map {
            if key == "seed" {
                file_seed = Some(value.as_u64().ok_or_else(|| {
                    ConfigError::Invalid("seed must be an unsigned integer".into())
                })?);
            }
            run[key.as_str()] = value.clone();
        }
    }

    let seed = match (ov.seed, file_seed) {
        (Some(s), _) => s,
        (None, Some(s)) => s,
        (None, None) => env_seed()?.unwrap_or(0),
    };
    run["seed"] = seed.into();

    if let Some(strategy) = &ov.strategy {
        run["strategy"] = Value::String(strategy.clone());
    }
    if let Some(precision) = &ov.precision {
        run["precision"] = match precision.as_str() {
            "fp32" => json!({ "mode": "fp32" }),
            "mixed" => {
                if run["precision"]["mode"] == "mixed" {
                    run["precision"].clone()
                } else {
                    json!({ "mode": "mixed", "loss_scale": 1024.0, "dynamic_skip": true })
                }
            }
            other => {
                return Err(ConfigError::Invalid(format!(
                    "unknown precision {other:?}; expected fp32 or mixed"
                )))
            }
        };
    }
    if let Some(nodes) = ov.nodes {
        run["cluster"]["nodes"] = nodes.into();
    }
    if let Some(gpus) = ov.gpus_per_node {
        run["cluster"]["gpus_per_node"] = gpus.into();
    }
    if let Some(batch) = ov.batch_per_worker {
        run["per_worker_batch"] = batch.into();
    }
    if let Some(steps) = ov.steps {
        run["steps"] = steps.into();
    }

    serde_json::from_value(run).map_err(ConfigError::Json)
}

/// Loads a `train` experiment: optional config file plus flag overrides.
pub fn load_experiment(
    path: Option<&Path>,
    ov: &Overrides,
    out_flag: Option<PathBuf>,
) -> Result<Experiment, ConfigError> {
    let file = match path {
        Some(p) => load_file(p)?,
        None => json!({}),
    };
    let empty = json!({});
    let run_section = file.get("run").unwrap_or(&empty);
    let run = resolve_run(&[run_section], ov)?;
    let memory = match file.get("memory") {
        Some(section) => serde_json::from_value(section.clone())?,
        None => MemorySection::default(),
    };
    let out = out_flag.or_else(|| {
        file.get("out")
            .and_then(Value::as_str)
            .map(PathBuf::from)
    });
    Ok(Experiment { run, memory, out })
}

/// A sweep config: an optional shared `base` run section, a non-empty list
/// of named cells, and the same optional `memory` gate and `out` path as a
/// train experiment.
#[derive(Debug)]
pub struct SweepPlan {
    pub cells: Vec<SweepCell>,
    pub memory: MemorySection,
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
pub struct SweepCell {
    pub name: String,
    pub run: Result<RunConfig, ConfigError>,
}

pub fn load_sweep(
    path: &Path,
    ov: &Overrides,
    out_flag: Option<PathBuf>,
) -> Result<SweepPlan, ConfigError> {
    let file = load_file(path)?;
    let empty = json!({});
    let base = file.get("base").unwrap_or(&empty);
    let cells_raw = file
        .get("cells")
        .and_then(Value::as_array)
        .ok_or_else(|| ConfigError::Invalid("sweep config needs a `cells` array".into()))?;
    if cells_raw.is_empty() {
        return Err(ConfigError::Invalid("sweep grid is empty".into()));
    }
    let mut cells = Vec::with_capacity(cells_raw.len());
    for (index, cell) in cells_raw.iter().enumerate() {
        let name = cell
            .get("name")
            .and_then(Value::as_str)
            .map(str::to_owned)
            .unwrap_or_else(|| format!("cell{index}"));
        let cell_run = cell.get("run").unwrap_or(&empty);
        cells.push(SweepCell {
            name,
            run: resolve_run(&[base, cell_run], ov),
        });
    }
    let memory = match file.get("memory") {
        Some(section) => serde_json::from_value(section.clone())?,
        None => MemorySection::default(),
    };
    let out = out_flag.or_else(|| {
        file.get("out")
            .and_then(Value::as_str)
            .map(PathBuf::from)
    });
    Ok(SweepPlan { cells, memory, out })
}
