//! Run configuration: defaults, JSON file layering, `--set` overrides and
//! per-key provenance.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use seasonal_dstm::analysis::PeriodSpec;
use seasonal_dstm::gibbs::{Hyperparameters, SamplerConfig};
use seasonal_dstm::ingest::{CsvSchema, GridCrop};
use seasonal_dstm::spatial::DEFAULT_JITTER;
use seasonal_dstm::synthetic::TruthSpec;
use seasonal_dstm::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Long-format CSV input; takes precedence over `dataset`.
    pub csv: Option<PathBuf>,
    /// Native dataset directory; defaults to `{output}/dataset`.
    pub dataset: Option<PathBuf>,
    pub schema: CsvSchema,
    /// Applied to CSV input only, after `crop`.
    pub crop: Option<GridCrop>,
    pub stride: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub knots: (usize, usize),
    /// Exponential decay; defaults to a third of the site-domain diagonal.
    pub phi: Option<f64>,
    pub jitter: f64,
    pub hyperparameters: Hyperparameters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryConfig {
    /// Draw directory; defaults to `{output}/draws`.
    pub draws: Option<PathBuf>,
    /// Years with amplitude/phase field grids; all fitted years when absent.
    pub field_years: Option<Vec<i32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub output: PathBuf,
    pub data: DataConfig,
    pub simulation: TruthSpec,
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub chunk_draws: usize,
    /// Truth record to score the fit against.
    pub recovery: Option<PathBuf>,
    /// Periods compared by the shift maps.
    pub periods: PeriodSpec,
    /// Periods compared by the exploratory screen.
    pub explore_periods: PeriodSpec,
    pub summary: SummaryConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output: PathBuf::from("out"),
            data: DataConfig { csv: None, dataset: None, schema: CsvSchema::default(), crop: None, stride: (2, 2) },
            simulation: TruthSpec::default(),
            model: ModelConfig { knots: (12, 12), phi: None, jitter: DEFAULT_JITTER, hyperparameters: Hyperparameters::default() },
            sampler: SamplerConfig::default(),
            chunk_draws: 500,
            recovery: None,
            periods: PeriodSpec { first: (1979..=1988).collect(), second: (2009..=2018).collect() },
            explore_periods: PeriodSpec { first: (1979..=1994).collect(), second: (2003..=2018).collect() },
            summary: SummaryConfig { draws: None, field_years: None },
        }
    }
}

/// Keys whose defaults are the published study's values.
const PUBLISHED: &[&str] = &[
    "data.stride",
    "model.knots",
    "model.hyperparameters.v",
    "model.hyperparameters.xi",
    "model.hyperparameters.a",
    "model.hyperparameters.b",
    "model.hyperparameters.a_w",
    "model.hyperparameters.b_w",
    "sampler.n_iter",
    "sampler.n_burn",
    "periods",
    "explore_periods",
];

/// Where a configuration value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    /// Default taken from the published analysis.
    Published,
    /// Default chosen by this implementation.
    Default,
    ConfigFile,
    Override,
    Flag,
}

/// A configuration value tree with the source of each leaf.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: RunConfig,
    pub provenance: BTreeMap<String, Source>,
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

/// Leaves of a JSON tree. Arrays are leaves: matrices and year lists are
/// set as a whole.
fn leaves(prefix: &str, v: &Value, out: &mut Vec<String>) {
    match v {
        Value::Object(m) if !m.is_empty() => {
            for (k, child) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                leaves(&key, child, out);
            }
        }
        _ => out.push(prefix.to_string()),
    }
}

/// Merge `patch` into `base`; keys must exist in `base` unless the base value
/// there is null (an unset optional, whose shape is free).
fn merge(base: &mut Value, patch: &Value, path: &str) -> seasonal_dstm::Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, pv) in p {
                let key = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(k) {
                    Some(bv) => merge(bv, pv, &key)?,
                    None => return Err(invalid(format!("unknown config key '{key}'"))),
                }
            }
            Ok(())
        }
        (b, p) => {
            *b = p.clone();
            Ok(())
        }
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> seasonal_dstm::Result<()> {
    let mut patch = value;
    for part in key.rsplit('.') {
        if part.is_empty() {
            return Err(invalid(format!("malformed key '{key}'")));
        }
        let mut m = Map::new();
        m.insert(part.to_string(), patch);
        patch = Value::Object(m);
    }
    merge(root, &patch, "")
}

/// Parse an override value as JSON, falling back to a plain string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Command-line layers applied on top of the defaults.
#[derive(Debug, Clone, Default)]
pub struct Layers {
    pub config_file: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
}

fn mark(prov: &mut BTreeMap<String, Source>, v: &Value, prefix: &str, source: Source) {
    let mut keys = Vec::new();
    leaves(prefix, v, &mut keys);
    let prefix_dot = format!("{prefix}.");
    prov.retain(|k, _| !(k == prefix || k.starts_with(&prefix_dot)));
    for k in keys {
        prov.insert(k, source);
    }
}

pub fn resolve(layers: &Layers) -> seasonal_dstm::Result<Resolved> {
    let mut tree = serde_json::to_value(RunConfig::default())?;
    let mut prov = BTreeMap::new();
    let mut keys = Vec::new();
    leaves("", &tree, &mut keys);
    for k in keys {
        let published = PUBLISHED.iter().any(|p| k == *p || k.starts_with(&format!("{p}.")));
        prov.insert(k, if published { Source::Published } else { Source::Default });
    }
    if let Some(path) = &layers.config_file {
        let text = std::fs::read_to_string(path)?;
        let patch: Value = serde_json::from_str(&text).map_err(|e| invalid(format!("config {}: {e}", path.display())))?;
        if !patch.is_object() {
            return Err(invalid(format!("config {} must be a JSON object", path.display())));
        }
        merge(&mut tree, &patch, "")?;
        if let Value::Object(m) = &patch {
            for (k, v) in m {
                mark_nested(&mut prov, v, k, Source::ConfigFile);
            }
        }
    }
    for item in &layers.overrides {
        let (k, v) = item.split_once('=').ok_or_else(|| invalid(format!("--set expects KEY=VALUE, got '{item}'")))?;
        let value = parse_value(v);
        set_path(&mut tree, k, value.clone())?;
        mark(&mut prov, &value, k, Source::Override);
    }
    if let Some(seed) = layers.seed {
        tree["sampler"]["seed"] = seed.into();
        tree["simulation"]["seed"] = seed.into();
        prov.insert("sampler.seed".into(), Source::Flag);
        prov.insert("simulation.seed".into(), Source::Flag);
    }
    if let Some(out) = &layers.output {
        tree["output"] = Value::String(out.to_string_lossy().into_owned());
        prov.insert("output".into(), Source::Flag);
    }
    let config: RunConfig = serde_json::from_value(tree).map_err(|e| invalid(format!("config: {e}")))?;
    Ok(Resolved { config, provenance: prov })
}

/// Mark the leaves of a config-file patch, descending only through objects
/// so unset optionals keep a single key.
fn mark_nested(prov: &mut BTreeMap<String, Source>, v: &Value, prefix: &str, source: Source) {
    match v {
        Value::Object(m) if !m.is_empty() && prov.keys().any(|k| k.starts_with(&format!("{prefix}."))) => {
            for (k, child) in m {
                mark_nested(prov, child, &format!("{prefix}.{k}"), source);
            }
        }
        _ => mark(prov, v, prefix, source),
    }
}

impl RunConfig {
    /// SHA-256 of the canonical JSON form; thread count is not part of it.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.data.dataset.clone().unwrap_or_else(|| self.output.join("dataset"))
    }

    pub fn draws_dir(&self) -> PathBuf {
        self.summary.draws.clone().unwrap_or_else(|| self.output.join("draws"))
    }
}

/// Labelled dump of a resolved configuration.
pub fn describe(resolved: &Resolved) -> Value {
    serde_json::json!({
        "config": resolved.config,
        "provenance": resolved.provenance,
    })
}

pub fn relative(path: &Path, base: &Path) -> String {
    path.strip_prefix(base).unwrap_or(path).to_string_lossy().replace('\\', "/")
}
