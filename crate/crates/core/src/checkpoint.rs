//! JSON checkpoints: config snapshot, schema, named float64 tensors and the
//! training RNG position.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{DenseStats, Schema};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: Vec<u8>,
    pub stream: u64,
    /// Decimal `u128`.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> RngState {
        RngState {
            seed: rng.get_seed().to_vec(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let seed: [u8; 32] = self
            .seed
            .as_slice()
            .try_into()
            .map_err(|_| Error::CheckpointCorrupt("rng seed is not 32 bytes".into()))?;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::CheckpointCorrupt("rng word position".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: RunConfig,
    pub schema: Schema,
    pub step: usize,
    pub rng: RngState,
    /// Dense-channel standardisation fitted on the training split.
    #[serde(default)]
    pub dense_stats: DenseStats,
    pub params: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn capture(config: &RunConfig, schema: &Schema, store: &ParamStore, step: usize, rng: RngState) -> Checkpoint {
        Checkpoint {
            format_version: FORMAT_VERSION,
            config: config.clone(),
            schema: schema.clone(),
            step,
            rng,
            dense_stats: DenseStats::default(),
            params: store
                .iter()
                .map(|(_, p)| NamedTensor {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    data: p.value.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.params.iter().find(|t| t.name == name)
    }

    /// Copies every stored tensor whose name passes `filter` into `store`.
    /// All conflicts are collected before anything is written, so a failed
    /// restore leaves `store` untouched.
    pub fn restore_into(&self, store: &mut ParamStore, filter: impl Fn(&str) -> bool) -> Result<()> {
        let mut problems = Vec::new();
        let mut updates = Vec::new();
        for (id, p) in store.iter() {
            if !filter(&p.name) {
                continue;
            }
            match self.tensor(&p.name) {
                None => problems.push(format!("`{}` missing from checkpoint", p.name)),
                Some(t) if t.shape != p.value.shape() => problems.push(format!(
                    "`{}` has shape {:?} in checkpoint but {:?} in model",
                    p.name,
                    t.shape,
                    p.value.shape()
                )),
                Some(t) => updates.push((id, t)),
            }
        }
        if !problems.is_empty() {
            return Err(Error::CheckpointIncompatible(problems));
        }
        for (id, t) in updates {
            let v = Tensor::new(t.shape.clone(), t.data.clone())
                .map_err(|_| Error::CheckpointCorrupt(format!("`{}` data does not match its shape", t.name)))?;
            *store.value_mut(id) = v;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serialises") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Checkpoint> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::CheckpointCorrupt(e.to_string()))?;
        let found = value
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::CheckpointCorrupt("no format_version".into()))?;
        if found != FORMAT_VERSION as u64 {
            return Err(Error::CheckpointVersion {
                found: found as u32,
                expected: FORMAT_VERSION,
            });
        }
        let ckpt: Checkpoint = serde_json::from_value(value).map_err(|e| Error::CheckpointCorrupt(e.to_string()))?;
        for t in &ckpt.params {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::CheckpointCorrupt(format!("`{}` data does not match its shape", t.name)));
            }
        }
        Ok(ckpt)
    }

    /// Writes through a temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_json()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_json(&text)
    }
}
