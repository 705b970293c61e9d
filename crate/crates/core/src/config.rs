//! Run configuration: one TOML document covering every stage, plus `key.path=value`
//! overrides. Each run records its resolved form next to its outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::SplitSpec;
use crate::features::GscEncodeConfig;
use crate::fusion::ModelConfig;
use crate::geo::GscQueryConfig;
use crate::signal::MelConfig;
use crate::synth::WorldSpec;
use crate::train::TrainConfig;
use crate::zeroshot::DEFAULT_TAU;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";
pub const VERSION_FILE: &str = "version.txt";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config {path}: {msg}")]
    Read { path: String, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("bad override {0:?}: expected key.path=value")]
    Override(String),
    #[error("writing run record in {path}: {source}")]
    Write { path: String, source: std::io::Error },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Training seeds; each gets its own model and output directory.
    pub seeds: Vec<u64>,
    /// Names for the label columns; `class_<i>` when empty.
    pub class_names: Vec<String>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seeds: vec![0], class_names: Vec::new() }
    }
}

/// Inputs and outputs of a run; command-line path flags land here.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub manifest: Option<PathBuf>,
    /// Directory holding `train.jsonl`, `val.jsonl` and `test.jsonl`.
    pub split_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZeroShotSection {
    pub tau: f64,
}

impl Default for ZeroShotSection {
    fn default() -> Self {
        Self { tau: DEFAULT_TAU }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// Bounding-box sides in metres for the context-only range sweep.
    pub side_m: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { side_m: vec![250.0, 500.0, 1000.0, 2000.0] }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub paths: PathsSection,
    pub query: GscQueryConfig,
    pub encode: GscEncodeConfig,
    pub mel: MelConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: SplitSpec,
    pub zeroshot: ZeroShotSection,
    pub sweep: SweepSection,
    pub synth: WorldSpec,
}

/// Parses an override value as TOML, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(root: &mut toml::Table, item: &str) -> Result<(), ConfigError> {
    let (key, raw) = item.split_once('=').ok_or_else(|| ConfigError::Override(item.to_string()))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::Override(item.to_string()));
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let slot = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = slot.as_table_mut().ok_or_else(|| ConfigError::Override(item.to_string()))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Parses `text` (possibly empty) and applies overrides in order.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut root: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let cfg: RunConfig = root.try_into().map_err(|e: toml::de::Error| ConfigError::Invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| ConfigError::Read { path: p.display().to_string(), msg: e.to_string() })?,
            None => String::new(),
        };
        Self::from_toml_with(&text, overrides).map_err(|e| match (path, e) {
            (Some(p), ConfigError::Invalid(msg)) => ConfigError::Read { path: p.display().to_string(), msg },
            (_, e) => e,
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.query.validate().map_err(|e| invalid(&e))?;
        self.mel.validate().map_err(|e| invalid(&e))?;
        self.train.validate().map_err(|e| invalid(&e))?;
        if self.run.seeds.is_empty() {
            return Err(ConfigError::Invalid("run.seeds is empty".into()));
        }
        if self.encode.dim == 0 {
            return Err(ConfigError::Invalid("encode.dim must be positive".into()));
        }
        if self.sweep.side_m.iter().any(|s| !(*s > 0.0)) {
            return Err(ConfigError::Invalid("sweep.side_m entries must be positive".into()));
        }
        Ok(())
    }

    /// A required path, or an error naming the missing key.
    pub fn path(&self, key: &str) -> Result<&Path, ConfigError> {
        let p = match key {
            "manifest" => &self.paths.manifest,
            "split_dir" => &self.paths.split_dir,
            "checkpoint" => &self.paths.checkpoint,
            "out_dir" => &self.paths.out_dir,
            _ => &None,
        };
        p.as_deref().ok_or_else(|| ConfigError::Invalid(format!("paths.{key} is not set")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Writes the resolved config and the tool version into `dir`.
    pub fn write_record(&self, dir: &Path) -> Result<(), ConfigError> {
        let wrap = |source| ConfigError::Write { path: dir.display().to_string(), source };
        std::fs::create_dir_all(dir).map_err(wrap)?;
        let text = format!("# geoat {VERSION}\n{}", self.to_toml());
        std::fs::write(dir.join(RESOLVED_CONFIG_FILE), text).map_err(wrap)?;
        std::fs::write(dir.join(VERSION_FILE), format!("geoat {VERSION}\n")).map_err(wrap)
    }
}
