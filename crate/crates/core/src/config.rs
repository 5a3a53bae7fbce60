//! Run configuration, read from TOML. Every field has a default and unknown
//! keys are rejected.
//!
//! ```toml
//! seed = 7
//!
//! [data]
//! preset = "siupd-like"
//! num_instances = 2000
//!
//! [model]
//! d_model = 32
//! experts = 4
//!
//! [pretrain]
//! epochs = 2
//! mask_rate = 0.15
//!
//! [finetune]
//! freeze_encoder = false
//!
//! [finetune.bilevel]
//! enabled = true
//! inner_steps = 50
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Preset, SyntheticConfig};
use crate::error::{Error, Result};
use crate::finetune::FinetuneConfig;
use crate::moe::ModelConfig;
use crate::pretrain::PretrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Synthetic preset name, used when `path` is absent.
    pub preset: String,
    /// Directory holding `schema.json` and `data.jsonl`.
    pub path: Option<PathBuf>,
    /// Overrides the preset's instance count.
    pub num_instances: Option<usize>,
    /// Train / validation / test fractions.
    pub split: Vec<f64>,
    /// Z-score dense channels with statistics of the training split.
    pub standardize_dense: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            preset: "siupd-like".into(),
            path: None,
            num_instances: None,
            split: vec![0.8, 0.1, 0.1],
            standardize_dense: true,
        }
    }
}

impl DataConfig {
    pub fn synthetic(&self) -> Result<SyntheticConfig> {
        let preset: Preset = self.preset.parse()?;
        let mut cfg = preset.config();
        if let Some(n) = self.num_instances {
            cfg.num_instances = n;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.finetune.bilevel.validate()?;
        if !(0.0..=1.0).contains(&self.pretrain.mask_rate) {
            return Err(Error::Config("pretrain.mask_rate must lie in [0, 1]".into()));
        }
        if self.pretrain.batch_size == 0 || self.finetune.batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.data.path.is_none() {
            self.data.preset.parse::<Preset>()?;
        }
        Ok(())
    }
}
