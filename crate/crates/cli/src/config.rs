//! Shared JSON config: defaults, config file, dotted-path overrides.

use std::path::{Path, PathBuf};

use bolddecode::prep::{PrepConfig, SplitKind, TIME_RESOLVED_FRACTION};
use bolddecode::synthcortex::DatasetConfig;
use bolddecode::trainer::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

pub const RESOLVED_FILE: &str = "resolved_config.json";
pub const RESOLVED_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub kind: SplitKind,
    /// Held-out run fraction of the time-resolved split.
    pub test_run_fraction: f64,
    pub exclude_leaked: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { kind: SplitKind::Standard, test_run_fraction: TIME_RESOLVED_FRACTION, exclude_leaked: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub repetition_seed: u64,
    /// Seed of the sampling noise at inference.
    pub sample_seed: u64,
    /// Subjects to train and evaluate; empty means all.
    pub subjects: Vec<usize>,
    /// Shifts of the time sweep, in TR units.
    pub deltas_tr: Vec<i32>,
    /// Shifts that get a specialized model in the time sweep.
    pub specialized_deltas_tr: Vec<i32>,
    /// Window durations of the duration sweep, in TR units.
    pub durations_tr: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            repetition_seed: 0,
            sample_seed: 0,
            subjects: Vec::new(),
            deltas_tr: (-6..=9).collect(),
            specialized_deltas_tr: vec![-3, 3, 6],
            durations_tr: (1..=6).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: PathBuf,
    pub prep: PathBuf,
    pub pretrain: PathBuf,
    pub train: PathBuf,
    pub infer: PathBuf,
    pub eval: PathBuf,
    pub sweeps: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data: "data".into(),
            prep: "prep".into(),
            pretrain: "pretrain".into(),
            train: "train".into(),
            infer: "infer".into(),
            eval: "eval".into(),
            sweeps: "sweeps".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    /// Seed of dataset generation and of the time-resolved split.
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub prep: PrepConfig,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Relative entries resolve against the output root.
    pub paths: Paths,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: DatasetConfig::default(),
            prep: PrepConfig::default(),
            split: SplitConfig::default(),
            model: ModelConfig::default(),
            pretrain: TrainConfig::pretrain(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl CliConfig {
    /// Cross-field checks, reported with the full key path.
    pub fn validate(&self) -> Result<(), CliError> {
        let scoped = |prefix: &str, r: bolddecode::Result<()>| {
            r.map_err(|e| match e {
                bolddecode::Error::Config { key, msg } => CliError::Config { key: format!("{prefix}.{key}"), msg },
                other => CliError::Config { key: prefix.into(), msg: other.to_string() },
            })
        };
        scoped("model", self.model.validate())?;
        scoped("train", self.train.validate())?;
        scoped("pretrain", self.pretrain.validate())?;
        scoped("model", self.model.check_window(&self.train.window))?;
        if !(0.0..1.0).contains(&self.split.test_run_fraction) || self.split.test_run_fraction == 0.0 {
            return Err(CliError::Config { key: "split.test_run_fraction".into(), msg: "must lie in (0, 1)".into() });
        }
        if self.dataset.resolution != self.model.unet.resolution {
            return Err(CliError::Config {
                key: "model.unet.resolution".into(),
                msg: format!(
                    "generator works at {} px but the dataset renders {} px",
                    self.model.unet.resolution, self.dataset.resolution
                ),
            });
        }
        Ok(())
    }

    pub fn path(&self, root: &Path, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            root.join(p)
        }
    }
}

/// Parses an override value: JSON when it parses, a bare string otherwise.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Sets `path` (dot separated) inside `root`; the key must already exist.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<(), CliError> {
    let unknown = || CliError::Config { key: path.to_string(), msg: "unknown config key".into() };
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(unknown)?;
        let slot = obj.get_mut(*part).ok_or_else(unknown)?;
        if i + 1 == parts.len() {
            *slot = value;
            return Ok(());
        }
        cur = slot;
    }
    Err(unknown())
}

/// Deep-merges `patch` into `base`, rejecting keys absent from `base`.
fn merge(base: &mut Value, patch: Value, prefix: &str) -> Result<(), CliError> {
    match patch {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                let slot = base
                    .as_object_mut()
                    .and_then(|o| o.get_mut(&k))
                    .ok_or_else(|| CliError::Config { key: key.clone(), msg: "unknown config key".into() })?;
                if v.is_object() && slot.is_object() {
                    merge(slot, v, &key)?;
                } else {
                    *slot = v;
                }
            }
            Ok(())
        }
        other => {
            *base = other;
            Ok(())
        }
    }
}

fn from_value(value: Value) -> Result<CliConfig, CliError> {
    serde_path_to_error::deserialize(value)
        .map_err(|e| CliError::Config { key: e.path().to_string(), msg: e.inner().to_string() })
}

/// Defaults, then the optional config file, then `key=value` overrides.
pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<CliConfig, CliError> {
    let mut value = serde_json::to_value(CliConfig::default()).expect("config serializes");
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })?;
        let patch: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Config { key: "<file>".into(), msg: format!("{}: {e}", path.display()) })?;
        // a resolved-config file nests the config under "config"
        let patch = match patch {
            Value::Object(mut m) if m.contains_key("invocation") && m.contains_key("config") => {
                m.remove("config").expect("checked")
            }
            other => other,
        };
        merge(&mut value, patch, "")?;
    }
    for (k, v) in overrides {
        set_path(&mut value, k, parse_value(v))?;
    }
    let cfg = from_value(value)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Splits `--a.b=v` / `--a.b v` style arguments out of argv. Everything
/// whose flag name contains a dot is an override.
pub fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>), CliError> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter().peekable();
    while let Some(a) = it.next() {
        let flag = a.strip_prefix("--").filter(|f| f.split('=').next().is_some_and(|k| k.contains('.')));
        match flag {
            Some(f) => match f.split_once('=') {
                Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
                None => {
                    let v = it
                        .next()
                        .ok_or_else(|| CliError::Config { key: f.to_string(), msg: "missing value".into() })?;
                    overrides.push((f.to_string(), v));
                }
            },
            None => rest.push(a),
        }
    }
    Ok((rest, overrides))
}
