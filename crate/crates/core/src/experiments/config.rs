//! Experiment configuration files.
//!
//! A config is a TOML document laid over a preset (or over the built-in
//! defaults when no preset is named). Every table rejects unknown keys, and
//! errors name the offending field as a dotted path.
//!
//! ```toml
//! schema_version = 1
//! preset = "example2-desk"
//! runs = 1
//!
//! [grid]
//! n = 20
//!
//! [train]
//! iterations = 500
//! ```

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::oracle::OracleConfig;
use crate::problems::{ProblemConstants, ProblemParams, BUILTIN_NAMES};
use crate::trainer::TrainConfig;

use super::presets;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentMode {
    Solve,
    Converge,
    Audit,
    Oracle,
    Crosscheck,
}

impl fmt::Display for ExperimentMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Solve => "solve",
            Self::Converge => "converge",
            Self::Audit => "audit",
            Self::Oracle => "oracle",
            Self::Crosscheck => "crosscheck",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    /// One of the built-in problem names.
    pub name: String,
    pub dim: usize,
    #[serde(default)]
    pub params: ProblemParams,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergeSection {
    pub n_list: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Required by `deep-bsde run`; the other subcommands set it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<ExperimentMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub problem: ProblemSection,
    pub grid: GridSection,
    pub train: TrainConfig,
    pub runs: usize,
    pub converge: ConvergeSection,
    pub oracle: OracleConfig,
    /// Constants for `audit`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audit: Option<ProblemConstants>,
    /// Number of validation paths to export after `solve` (0 = none).
    #[serde(default)]
    pub export_paths: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        presets::linear1d_smoke()
    }
}

/// A config problem, with the dotted path of the field at fault when known.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigError {
    pub field: Option<String>,
    pub message: String,
}

impl ConfigError {
    pub fn field(field: &str, message: impl Into<String>) -> Self {
        Self {
            field: Some(field.to_string()),
            message: message.into(),
        }
    }

    fn general(message: impl Into<String>) -> Self {
        Self {
            field: None,
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.field {
            Some(path) => write!(f, "{path}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

/// Command-line settings that take precedence over the file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub preset: Option<String>,
    pub mode: Option<ExperimentMode>,
    pub seed: Option<u64>,
    pub deterministic: bool,
    pub max_seconds: Option<f64>,
    pub export_paths: Option<usize>,
    pub output: Option<String>,
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn lookup<'a>(table: &'a toml::Table, path: &[&str]) -> Option<&'a toml::Value> {
    let (first, rest) = path.split_first()?;
    let v = table.get(*first)?;
    if rest.is_empty() {
        Some(v)
    } else {
        lookup(v.as_table()?, rest)
    }
}

/// Parses `text` (if any), lays it over the selected preset and applies
/// `overrides`.
pub fn resolve(text: Option<&str>, overrides: &Overrides) -> Result<ExperimentConfig, ConfigError> {
    let user: toml::Table = match text {
        Some(t) => toml::from_str(t).map_err(|e| ConfigError::general(format!("parse error: {e}")))?,
        None => toml::Table::new(),
    };
    if text.is_some() {
        match user.get("schema_version") {
            None => return Err(ConfigError::field("schema_version", "missing (expected 1)")),
            Some(toml::Value::Integer(v)) if *v == SCHEMA_VERSION as i64 => {}
            Some(v) => {
                return Err(ConfigError::field(
                    "schema_version",
                    format!("unsupported version {v}, expected {SCHEMA_VERSION}"),
                ))
            }
        }
    }
    let preset_name = match (&overrides.preset, user.get("preset")) {
        (Some(p), _) => Some(p.clone()),
        (None, Some(toml::Value::String(p))) => Some(p.clone()),
        (None, Some(_)) => return Err(ConfigError::field("preset", "expected a string")),
        (None, None) => None,
    };
    let base_cfg = match &preset_name {
        Some(name) => presets::preset(name).ok_or_else(|| {
            ConfigError::field(
                "preset",
                format!("unknown preset `{name}` (known: {})", presets::PRESET_NAMES.join(", ")),
            )
        })?,
        None => ExperimentConfig::default(),
    };
    let mut merged = toml::Table::try_from(&base_cfg).map_err(|e| ConfigError::general(e.to_string()))?;
    merge(&mut merged, user.clone());
    if let Some(name) = &preset_name {
        merged.insert("preset".into(), toml::Value::String(name.clone()));
    }

    let de = toml::Value::Table(merged);
    let mut cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        ConfigError::field(&path, e.into_inner().message().to_string())
    })?;

    // the schedule length follows the iteration count unless set explicitly
    match lookup(&user, &["train", "lr", "total_steps"]) {
        Some(_) if cfg.train.lr.total_steps != cfg.train.iterations => {
            return Err(ConfigError::field(
                "train.lr.total_steps",
                format!(
                    "must equal train.iterations ({}), got {}",
                    cfg.train.iterations, cfg.train.lr.total_steps
                ),
            ))
        }
        _ => cfg.train.lr.total_steps = cfg.train.iterations,
    }

    if let Some(mode) = overrides.mode {
        if let Some(file_mode) = cfg.mode.filter(|m| *m != mode) {
            return Err(ConfigError::field(
                "mode",
                format!("config asks for `{file_mode}` but the command is `{mode}`"),
            ));
        }
        cfg.mode = Some(mode);
    }
    if let Some(seed) = overrides.seed {
        cfg.train.seed = seed;
    }
    if overrides.deterministic {
        cfg.train.deterministic = true;
    }
    if let Some(s) = overrides.max_seconds {
        cfg.train.max_seconds = Some(s);
    }
    if let Some(n) = overrides.export_paths {
        cfg.export_paths = n;
    }
    if let Some(o) = &overrides.output {
        cfg.output = Some(o.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::field(
                "schema_version",
                format!("unsupported version {}", self.schema_version),
            ));
        }
        if !BUILTIN_NAMES.contains(&self.problem.name.as_str()) {
            return Err(ConfigError::field(
                "problem.name",
                format!("unknown problem `{}` (known: {})", self.problem.name, BUILTIN_NAMES.join(", ")),
            ));
        }
        if self.problem.dim == 0 {
            return Err(ConfigError::field("problem.dim", "must be at least 1"));
        }
        if self.grid.n == 0 {
            return Err(ConfigError::field("grid.n", "must be at least 1"));
        }
        if self.runs == 0 {
            return Err(ConfigError::field("runs", "must be at least 1"));
        }
        if self.converge.n_list.is_empty() || self.converge.n_list.contains(&0) {
            return Err(ConfigError::field("converge.n_list", "needs at least one entry, all >= 1"));
        }
        if let Some(s) = self.train.max_seconds {
            if !(s > 0.0) {
                return Err(ConfigError::field("train.max_seconds", format!("must be positive, got {s}")));
            }
        }
        self.train
            .validate()
            .map_err(|e| ConfigError::field("train", e.to_string()))?;
        let o = &self.oracle;
        if o.degree > crate::oracle::MAX_DEGREE {
            return Err(ConfigError::field("oracle.degree", format!("at most {}", crate::oracle::MAX_DEGREE)));
        }
        if o.n_paths == 0 || !(o.picard_tol > 0.0) || o.max_sweeps == 0 || o.max_inner == 0 {
            return Err(ConfigError::field(
                "oracle",
                "n_paths, picard_tol, max_sweeps and max_inner must be positive",
            ));
        }
        if let Some(k) = &self.audit {
            k.validate().map_err(|e| ConfigError::field("audit", e.to_string()))?;
        }
        if self.mode == Some(ExperimentMode::Audit) && self.audit.is_none() {
            return Err(ConfigError::field("audit", "audit mode needs an [audit] table of constants"));
        }
        Ok(())
    }

    /// TOML that [`resolve`] maps back to this config.
    pub fn to_toml(&self) -> Result<String, ConfigError> {
        toml::to_string(self).map_err(|e| ConfigError::general(format!("cannot serialize config: {e}")))
    }
}
