//! Experiment specification files (TOML, schema version 1).
//!
//! A spec carries the dataset, noise, model and trainer blocks of a run plus
//! the cleaner mode, the list of seeds and an optional output directory.
//! Values resolve as command-line override > file > built-in default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::trainer::{
    CleanerMode, ConfigError, DatasetConfig, ModelConfig, NoiseConfig, RunConfig, TrainerConfig,
};

pub const SCHEMA_VERSION: u32 = 1;

fn default_version() -> u32 {
    SCHEMA_VERSION
}

fn default_mode() -> CleanerMode {
    CleanerMode::CpcAgn
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default = "default_version")]
    pub version: u32,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub trainer: TrainerConfig,
    #[serde(default = "default_mode")]
    pub cleaner_mode: CleanerMode,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            version: SCHEMA_VERSION,
            dataset: DatasetConfig::default(),
            noise: NoiseConfig::default(),
            model: ModelConfig::default(),
            trainer: TrainerConfig::default(),
            cleaner_mode: default_mode(),
            seeds: default_seeds(),
            output_dir: None,
        }
    }
}

/// Problems with a spec file or an override, located by field path.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SpecError {
    #[error("cannot read {path}: {reason}")]
    Read { path: String, reason: String },
    #[error("{0}")]
    Syntax(String),
    #[error("{field}: {message}")]
    Field { field: String, message: String },
}

impl SpecError {
    pub fn field(&self) -> Option<&str> {
        match self {
            SpecError::Field { field, .. } => Some(field),
            _ => None,
        }
    }
}

impl From<ConfigError> for SpecError {
    fn from(e: ConfigError) -> Self {
        SpecError::Field {
            field: e.field,
            message: e.message,
        }
    }
}

/// A `key.path=value` override; the value is read as a TOML literal and
/// falls back to a bare string.
pub fn parse_assignment(s: &str) -> Result<(String, toml::Value), SpecError> {
    let (key, raw) = s.split_once('=').ok_or_else(|| SpecError::Field {
        field: s.to_string(),
        message: "expected key=value".into(),
    })?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(SpecError::Field {
            field: key.to_string(),
            message: "empty key segment".into(),
        });
    }
    Ok((key.to_string(), parse_literal(raw.trim())))
}

pub fn parse_literal(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), SpecError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("nonempty key");
    let mut cur = table;
    for (i, p) in parts.iter().enumerate() {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| SpecError::Field {
            field: parts[..=i].join("."),
            message: "not a table".into(),
        })?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl ExperimentSpec {
    pub fn from_toml_str(text: &str) -> Result<Self, SpecError> {
        Self::with_overrides(text, &[])
    }

    /// Parses `text`, applies `overrides` in order, then validates.
    pub fn with_overrides(text: &str, overrides: &[(String, toml::Value)]) -> Result<Self, SpecError> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| SpecError::Syntax(e.to_string()))?;
        for (k, v) in overrides {
            set_path(&mut table, k, v.clone())?;
        }
        let spec = Self::from_table(table)?;
        spec.validate()?;
        Ok(spec)
    }

    fn from_table(table: toml::Table) -> Result<Self, SpecError> {
        serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
            let field = e.path().to_string();
            SpecError::Field {
                field: if field == "." { "spec".into() } else { field },
                message: e.into_inner().to_string(),
            }
        })
    }

    pub fn load(path: &Path, overrides: &[(String, toml::Value)]) -> Result<Self, SpecError> {
        let text = std::fs::read_to_string(path).map_err(|e| SpecError::Read {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::with_overrides(&text, overrides)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        if self.version != SCHEMA_VERSION {
            return Err(SpecError::Field {
                field: "version".into(),
                message: format!("unsupported schema version {}", self.version),
            });
        }
        if self.seeds.is_empty() {
            return Err(SpecError::Field {
                field: "seeds".into(),
                message: "need at least one seed".into(),
            });
        }
        self.run_config(self.seeds[0]).validate()?;
        Ok(())
    }

    pub fn run_config(&self, seed: u64) -> RunConfig {
        RunConfig {
            dataset: self.dataset.clone(),
            noise: self.noise.clone(),
            model: self.model.clone(),
            trainer: self.trainer.clone(),
            cleaner_mode: self.cleaner_mode,
            seed,
        }
    }
}
