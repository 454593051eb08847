//! Experiment configuration: TOML file, dotted-path overrides and the
//! `CGMN_SEED` environment override. Every random choice in a run is fixed
//! by `train.seed`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::MaskMode;
use crate::encoder::Activation;
use crate::interact::{CrossGraphMode, NegativeSet};
use crate::optim::Optimizer;

pub const SEED_ENV_VAR: &str = "CGMN_SEED";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("unknown or invalid config key in override {key:?}: {msg}")]
    BadOverride { key: String, msg: String },
    #[error("override must look like key.path=value, got {0:?}")]
    MalformedOverride(String),
    #[error("invalid {SEED_ENV_VAR} value {0:?}")]
    BadSeedEnv(String),
    #[error("config invalid: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    Ged,
    Bsd,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Task::Ged => write!(f, "ged"),
            Task::Bsd => write!(f, "bsd"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub task: Task,
    pub optimizer: Optimizer,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            lr: 1e-4,
            epochs: 200,
            batch_size: 32,
            seed: 42,
            task: Task::Ged,
            optimizer: Optimizer::Adam,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub layers: usize,
    pub hidden: usize,
    pub activation: Activation,
    pub cross_view: bool,
    pub cross_graph: bool,
    pub cross_graph_mode: CrossGraphMode,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            layers: 3,
            hidden: 100,
            activation: Activation::Relu,
            cross_view: true,
            cross_graph: true,
            cross_graph_mode: CrossGraphMode::Vector,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub tau: f64,
    pub negatives: NegativeSet,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection {
            tau: 0.5,
            negatives: NegativeSet::Both,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    pub p_mask: f64,
    pub p_drop: f64,
    /// Explicit augmentation seed; derived from `train.seed` when absent.
    pub seed: Option<u64>,
    pub mask_mode: MaskMode,
}

impl Default for AugmentSection {
    fn default() -> Self {
        AugmentSection {
            p_mask: 0.1,
            p_drop: 0.1,
            seed: None,
            mask_mode: MaskMode::Column,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadSection {
    /// Hidden widths of the scoring head MLP.
    pub ged_mlp: Vec<usize>,
    pub symmetrize: bool,
    pub bsd_threshold: f64,
}

impl Default for HeadSection {
    fn default() -> Self {
        HeadSection {
            ged_mlp: vec![64, 16],
            symmetrize: false,
            bsd_threshold: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrateSection {
    pub label_fraction: f64,
}

impl Default for CalibrateSection {
    fn default() -> Self {
        CalibrateSection {
            label_fraction: 0.01,
        }
    }
}

/// Optional data paths so a config file alone can drive a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub graphs: Option<PathBuf>,
    pub pairs: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub train: TrainSection,
    pub model: ModelSection,
    pub loss: LossSection,
    pub augment: AugmentSection,
    pub head: HeadSection,
    pub calibrate: CalibrateSection,
    pub data: DataSection,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError::Invalid(msg));
        if !(self.train.lr > 0.0) {
            return fail(format!("train.lr must be positive, got {}", self.train.lr));
        }
        if self.train.epochs == 0 {
            return fail("train.epochs must be at least 1".into());
        }
        if self.train.batch_size == 0 {
            return fail("train.batch_size must be at least 1".into());
        }
        if self.model.layers == 0 {
            return fail("model.layers must be at least 1".into());
        }
        if self.model.hidden == 0 {
            return fail("model.hidden must be at least 1".into());
        }
        if !(self.loss.tau > 0.0) {
            return fail(format!("loss.tau must be positive, got {}", self.loss.tau));
        }
        for (name, p) in [
            ("augment.p_mask", self.augment.p_mask),
            ("augment.p_drop", self.augment.p_drop),
        ] {
            if !(0.0..=1.0).contains(&p) || p.is_nan() {
                return fail(format!("{name} must lie in [0,1], got {p}"));
            }
        }
        if !(0.0..=1.0).contains(&self.calibrate.label_fraction) {
            return fail(format!(
                "calibrate.label_fraction must lie in [0,1], got {}",
                self.calibrate.label_fraction
            ));
        }
        if self.head.ged_mlp.iter().any(|&w| w == 0) {
            return fail("head.ged_mlp widths must be positive".into());
        }
        Ok(())
    }

    /// Seed for view generation; falls back to the training seed.
    pub fn augment_seed(&self) -> u64 {
        self.augment.seed.unwrap_or(self.train.seed)
    }
}

/// Load a config file (or defaults when `path` is `None`), apply dotted-path
/// overrides in order, then the `CGMN_SEED` environment override, and
/// validate.
pub fn load_config(
    path: Option<&Path>,
    overrides: &[String],
) -> Result<TrainConfig, ConfigError> {
    let mut value: toml::Value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                path: p.display().to_string(),
                source,
            })?;
            toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?
        }
        None => toml::Value::Table(toml::map::Map::new()),
    };

    for spec in overrides {
        apply_override(&mut value, spec)?;
    }

    let mut cfg: TrainConfig = value
        .try_into()
        .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;

    if let Ok(raw) = std::env::var(SEED_ENV_VAR) {
        cfg.train.seed = raw
            .parse()
            .map_err(|_| ConfigError::BadSeedEnv(raw.clone()))?;
    }

    cfg.validate()?;
    Ok(cfg)
}

/// Apply one `key.path=value` override to a TOML tree. The value is parsed
/// as TOML when possible and treated as a bare string otherwise.
pub fn apply_override(root: &mut toml::Value, spec: &str) -> Result<(), ConfigError> {
    let (key, raw_value) = spec
        .split_once('=')
        .ok_or_else(|| ConfigError::MalformedOverride(spec.to_string()))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(ConfigError::MalformedOverride(spec.to_string()));
    }

    let parsed: toml::Value = match toml::from_str::<toml::Value>(&format!("v = {raw_value}")) {
        Ok(toml::Value::Table(t)) => t.get("v").cloned().unwrap(),
        _ => toml::Value::String(raw_value.trim().to_string()),
    };

    let mut node = &mut *root;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        let table = node.as_table_mut().ok_or_else(|| ConfigError::BadOverride {
            key: key.to_string(),
            msg: format!("{part} is not a table"),
        })?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::map::Map::new()));
    }
    let last = parts.last().unwrap();
    let table = node.as_table_mut().ok_or_else(|| ConfigError::BadOverride {
        key: key.to_string(),
        msg: "parent is not a table".into(),
    })?;
    table.insert(last.to_string(), parsed);

    // Surface unknown keys now rather than at the final deserialize, so the
    // error names the offending override.
    let check: Result<TrainConfig, _> = root.clone().try_into();
    if let Err(e) = check {
        return Err(ConfigError::BadOverride {
            key: key.to_string(),
            msg: e.to_string(),
        });
    }
    Ok(())
}
