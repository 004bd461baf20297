//! Experiment configuration: a TOML file plus dotted-key overrides.
//!
//! ```toml
//! seed = 0
//! lr = 0.001
//! alpha = 1.0          # L2 weight
//! beta = 1.0           # (1 - SSIM) weight
//! width_mult = 1.0     # decoder width multiplier; preset value when absent
//! k = 14               # preset value when absent (micro: 2)
//! f = 8                # preset value when absent (micro: 3)
//! batch_size = 8
//! optimizer = "adam"   # sgd | momentum | adam
//! preset = "desk"      # desk (256 input) | micro (64 input)
//!
//! [phase1]
//! epochs = 20
//! [phase2]
//! epochs = 20
//! [crwt]
//! enabled = true
//! [data]
//! path = "data"
//! [out]
//! dir = "runs/default"
//! ```
//!
//! Relative paths resolve against the working directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spmkd_core::{LossConfig, ModelConfig, OptimizerKind, TrainConfig};

use crate::error::{Error, IoContext, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerName {
    Sgd,
    Momentum,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Micro,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochSection {
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrwtSection {
    pub enabled: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutSection {
    pub dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub lr: f64,
    pub alpha: f64,
    pub beta: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub width_mult: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f: Option<usize>,
    pub batch_size: usize,
    pub optimizer: OptimizerName,
    pub preset: Preset,
    pub phase1: EpochSection,
    pub phase2: EpochSection,
    pub crwt: CrwtSection,
    pub data: DataSection,
    pub out: OutSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        ExperimentConfig {
            seed: t.seed,
            lr: t.lr,
            alpha: t.loss.alpha,
            beta: t.loss.beta,
            width_mult: None,
            k: None,
            f: None,
            batch_size: t.batch_size,
            optimizer: OptimizerName::Adam,
            preset: Preset::Desk,
            phase1: EpochSection { epochs: t.phase1_epochs },
            phase2: EpochSection { epochs: t.phase2_epochs },
            crwt: CrwtSection { enabled: t.crwt },
            data: DataSection { path: "data".into() },
            out: OutSection { dir: "runs/default".into() },
        }
    }
}

/// Parses an override value as a TOML literal, falling back to a bare string.
fn literal(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()))
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config(format!("empty key {key:?}")))?;
    let mut t = table;
    for p in parts {
        let entry = t.entry(p.to_owned()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        t = entry.as_table_mut().ok_or_else(|| Error::Config(format!("{key}: {p} is not a table")))?;
    }
    t.insert(last.to_owned(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Reads `path` (or starts from defaults) and applies `key=value`
    /// overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).at(p)?;
                text.parse::<toml::Table>().map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for (k, v) in overrides {
            set_dotted(&mut table, k, literal(v))?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(table).try_into().map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config()?;
        self.train_config().validate()?;
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut m = match self.preset {
            Preset::Desk => ModelConfig::default(),
            Preset::Micro => ModelConfig::micro(),
        };
        if let Some(w) = self.width_mult {
            m.decoder.width_mult = w;
        }
        if let Some(k) = self.k {
            m.encoder.k = k;
        }
        if let Some(f) = self.f {
            m.encoder.f = f;
        }
        m.validate()?;
        Ok(m)
    }

    pub fn train_config(&self) -> TrainConfig {
        let optimizer = match self.optimizer {
            OptimizerName::Sgd => OptimizerKind::Sgd,
            OptimizerName::Momentum => OptimizerKind::Momentum { momentum: 0.9 },
            OptimizerName::Adam => OptimizerKind::adam(),
        };
        TrainConfig {
            seed: self.seed,
            phase1_epochs: self.phase1.epochs,
            phase2_epochs: self.phase2.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            optimizer,
            loss: LossConfig { alpha: self.alpha, beta: self.beta, ..LossConfig::default() },
            crwt: self.crwt.enabled,
            ..TrainConfig::default()
        }
    }
}
