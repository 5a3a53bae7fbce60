//! Multi-channel behaviour sequences: schema, validation, storage and splits.
//!
//! Token ids 0 and 1 of every category/id vocabulary are reserved for
//! [`MASK_TOKEN`] and [`PAD_TOKEN`].

mod io;
mod synthetic;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_dataset, load_dataset_dir, load_schema, write_dataset, write_dataset_dir, DATA_FILE, SCHEMA_FILE};
pub use synthetic::{generate_synthetic, FeatureRef, Preset, SyntheticConfig, TaskMode, TaskRule};

pub const MASK_TOKEN: u32 = 0;
pub const PAD_TOKEN: u32 = 1;
/// First id available for real tokens.
pub const FIRST_TOKEN: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    Category,
    Id,
    Dense,
}

fn one() -> usize {
    1
}

fn is_one(v: &usize) -> bool {
    *v == 1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSpec {
    pub name: String,
    pub kind: ChannelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embed_dim: Option<usize>,
    #[serde(default)]
    pub is_mcp: bool,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub num_shards: usize,
}

impl ChannelSpec {
    pub fn category(name: impl Into<String>, vocab_size: usize, embed_dim: usize) -> Self {
        ChannelSpec {
            name: name.into(),
            kind: ChannelKind::Category,
            vocab_size: Some(vocab_size),
            embed_dim: Some(embed_dim),
            is_mcp: false,
            num_shards: 1,
        }
    }

    pub fn id(name: impl Into<String>, vocab_size: usize, embed_dim: usize, num_shards: usize) -> Self {
        ChannelSpec {
            name: name.into(),
            kind: ChannelKind::Id,
            vocab_size: Some(vocab_size),
            embed_dim: Some(embed_dim),
            is_mcp: false,
            num_shards,
        }
    }

    pub fn dense(name: impl Into<String>) -> Self {
        ChannelSpec {
            name: name.into(),
            kind: ChannelKind::Dense,
            vocab_size: None,
            embed_dim: None,
            is_mcp: false,
            num_shards: 1,
        }
    }

    pub fn mcp(mut self) -> Self {
        self.is_mcp = true;
        self
    }

    pub fn is_token(&self) -> bool {
        self.kind != ChannelKind::Dense
    }

    pub fn vocab(&self) -> usize {
        self.vocab_size.unwrap_or(0)
    }

    /// Width this channel contributes to the concatenated feature vector.
    pub fn feature_width(&self) -> usize {
        match self.kind {
            ChannelKind::Dense => 1,
            _ => self.embed_dim.unwrap_or(0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Schema(format!("channel `{}`: {m}", self.name)));
        match self.kind {
            ChannelKind::Dense => {
                if self.vocab_size.is_some() || self.embed_dim.is_some() {
                    return err("dense channels have no vocabulary or embedding");
                }
                if self.is_mcp {
                    return err("dense channels cannot be MCP tasks");
                }
                if self.num_shards != 1 {
                    return err("dense channels cannot be sharded");
                }
            }
            kind => {
                match self.vocab_size {
                    Some(v) if v > FIRST_TOKEN as usize => {}
                    _ => return err("vocab_size must exceed the two reserved ids"),
                }
                if !matches!(self.embed_dim, Some(d) if d > 0) {
                    return err("embed_dim must be positive");
                }
                if self.num_shards == 0 {
                    return err("num_shards must be positive");
                }
                if kind == ChannelKind::Category && self.num_shards != 1 {
                    return err("only id channels are sharded");
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    BinaryClassification,
    Regression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub objective: Objective,
}

impl TaskSpec {
    pub fn binary(name: impl Into<String>) -> Self {
        TaskSpec {
            name: name.into(),
            objective: Objective::BinaryClassification,
        }
    }

    pub fn regression(name: impl Into<String>) -> Self {
        TaskSpec {
            name: name.into(),
            objective: Objective::Regression,
        }
    }
}

/// Channel and task specs of a dataset (the schema sidecar file).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    pub channels: Vec<ChannelSpec>,
    #[serde(default)]
    pub tasks: Vec<TaskSpec>,
}

impl Schema {
    pub fn new(channels: Vec<ChannelSpec>, tasks: Vec<TaskSpec>) -> Result<Self> {
        let s = Schema { channels, tasks };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.channels {
            c.validate()?;
            if !seen.insert(c.name.as_str()) {
                return Err(Error::Schema(format!("duplicate channel `{}`", c.name)));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for t in &self.tasks {
            if !seen.insert(t.name.as_str()) {
                return Err(Error::Schema(format!("duplicate task `{}`", t.name)));
            }
        }
        Ok(())
    }

    pub fn channel(&self, name: &str) -> Option<&ChannelSpec> {
        self.channels.iter().find(|c| c.name == name)
    }

    pub fn mcp_channels(&self) -> impl Iterator<Item = &ChannelSpec> {
        self.channels.iter().filter(|c| c.is_mcp)
    }
}

/// One channel's sequence: integer tokens or dense reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ChannelSeq {
    Tokens(Vec<u32>),
    Dense(Vec<f64>),
}

impl ChannelSeq {
    pub fn len(&self) -> usize {
        match self {
            ChannelSeq::Tokens(t) => t.len(),
            ChannelSeq::Dense(d) => d.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tokens(&self) -> Option<&[u32]> {
        match self {
            ChannelSeq::Tokens(t) => Some(t),
            ChannelSeq::Dense(_) => None,
        }
    }

    pub fn dense(&self) -> Option<&[f64]> {
        match self {
            ChannelSeq::Dense(d) => Some(d),
            ChannelSeq::Tokens(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Instance {
    pub user_id: u64,
    pub channels: BTreeMap<String, ChannelSeq>,
    #[serde(default)]
    pub labels: BTreeMap<String, f64>,
    #[serde(default)]
    pub indicators: BTreeMap<String, u8>,
}

impl Instance {
    /// Shared sequence length (0 for an instance without channels).
    pub fn len(&self) -> usize {
        self.channels.values().next().map_or(0, |c| c.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tokens(&self, channel: &str) -> Option<&[u32]> {
        self.channels.get(channel).and_then(|c| c.tokens())
    }

    pub fn indicator(&self, task: &str) -> bool {
        self.indicators.get(task).copied().unwrap_or(0) == 1
    }

    pub fn label(&self, task: &str) -> Option<f64> {
        self.labels.get(task).copied()
    }

    /// Keeps only the most recent `max_len` positions of every channel.
    pub fn truncate_recent(&mut self, max_len: usize) {
        for seq in self.channels.values_mut() {
            match seq {
                ChannelSeq::Tokens(t) if t.len() > max_len => {
                    t.drain(..t.len() - max_len);
                }
                ChannelSeq::Dense(d) if d.len() > max_len => {
                    d.drain(..d.len() - max_len);
                }
                _ => {}
            }
        }
    }

    /// Checks this instance against `schema`.
    pub fn validate(&self, schema: &Schema) -> Result<()> {
        for name in self.channels.keys() {
            if schema.channel(name).is_none() {
                return Err(Error::Schema(format!("unknown channel `{name}`")));
            }
        }
        let mut first: Option<(&str, usize)> = None;
        for spec in &schema.channels {
            let seq = self
                .channels
                .get(&spec.name)
                .ok_or_else(|| Error::Schema(format!("missing channel `{}`", spec.name)))?;
            match (spec.kind, seq) {
                (ChannelKind::Dense, ChannelSeq::Dense(v)) => {
                    if v.iter().any(|x| !x.is_finite()) {
                        return Err(Error::Schema(format!("channel `{}` has non-finite values", spec.name)));
                    }
                }
                (ChannelKind::Dense, ChannelSeq::Tokens(t)) if t.is_empty() => {}
                (ChannelKind::Dense, ChannelSeq::Tokens(_)) => {
                    return Err(Error::Schema(format!("channel `{}` expects reals", spec.name)));
                }
                (_, ChannelSeq::Tokens(t)) => {
                    let vocab = spec.vocab();
                    if let Some(&bad) = t.iter().find(|&&x| x as usize >= vocab) {
                        return Err(Error::Vocabulary {
                            channel: spec.name.clone(),
                            id: bad as u64,
                            vocab,
                        });
                    }
                }
                (_, ChannelSeq::Dense(d)) if d.is_empty() => {}
                (_, ChannelSeq::Dense(_)) => {
                    return Err(Error::Schema(format!("channel `{}` expects integer tokens", spec.name)));
                }
            }
            match first {
                None => first = Some((&spec.name, seq.len())),
                Some((name, len)) if len != seq.len() => {
                    return Err(Error::LengthMismatch {
                        first: name.to_string(),
                        first_len: len,
                        second: spec.name.clone(),
                        second_len: seq.len(),
                    })
                }
                _ => {}
            }
        }
        for name in self.labels.keys().chain(self.indicators.keys()) {
            if !schema.tasks.iter().any(|t| &t.name == name) {
                return Err(Error::Schema(format!("unknown task `{name}`")));
            }
        }
        for task in &schema.tasks {
            match self.indicators.get(&task.name) {
                None | Some(0) => continue,
                Some(1) => {}
                Some(v) => {
                    return Err(Error::Schema(format!("indicator for `{}` must be 0 or 1, got {v}", task.name)))
                }
            }
            let label = self
                .label(&task.name)
                .ok_or_else(|| Error::Schema(format!("task `{}` is indicated but has no label", task.name)))?;
            if task.objective == Objective::BinaryClassification && label != 0.0 && label != 1.0 {
                return Err(Error::Schema(format!(
                    "binary task `{}` has label {label}",
                    task.name
                )));
            }
            if !label.is_finite() {
                return Err(Error::Schema(format!("task `{}` label is not finite", task.name)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Unsplit,
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub schema: Schema,
    pub instances: Vec<Instance>,
    pub split: Split,
}

impl Dataset {
    /// Validates every instance and builds the dataset.
    pub fn new(schema: Schema, instances: Vec<Instance>) -> Result<Self> {
        schema.validate()?;
        for inst in &instances {
            inst.validate(&schema)?;
        }
        Ok(Dataset {
            schema,
            instances,
            split: Split::Unsplit,
        })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn mean_length(&self) -> f64 {
        if self.instances.is_empty() {
            return 0.0;
        }
        self.instances.iter().map(|i| i.len() as f64).sum::<f64>() / self.instances.len() as f64
    }

    pub fn truncate_recent(&mut self, max_len: usize) {
        self.instances.iter_mut().for_each(|i| i.truncate_recent(max_len));
    }

    fn subset(&self, idx: &[usize], split: Split) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            instances: idx.iter().map(|&i| self.instances[i].clone()).collect(),
            split,
        }
    }
}

/// Deterministic shuffled split into train/validation/test. `ratios` has two
/// (train, validation) or three entries and must sum to 1.
pub fn split_dataset(ds: &Dataset, ratios: &[f64], seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    if !(2..=3).contains(&ratios.len()) {
        return Err(Error::Config("split needs 2 or 3 ratios".into()));
    }
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r) || r.is_nan()) {
        return Err(Error::Config(format!("split ratios {ratios:?} must lie in [0, 1]")));
    }
    if (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must sum to 1")));
    }
    let n = ds.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((ratios[0] * n as f64).round() as usize).min(n);
    let n_val = if ratios.len() == 3 {
        ((ratios[1] * n as f64).round() as usize).min(n - n_train)
    } else {
        n - n_train
    };
    let (train, rest) = order.split_at(n_train);
    let (val, test) = rest.split_at(n_val);
    Ok((
        ds.subset(train, Split::Train),
        ds.subset(val, Split::Validation),
        ds.subset(test, Split::Test),
    ))
}

/// Per-dense-channel z-score statistics.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DenseStats {
    pub channels: BTreeMap<String, (f64, f64)>,
}

impl DenseStats {
    /// Mean and standard deviation of every dense channel over all positions.
    pub fn fit(ds: &Dataset) -> DenseStats {
        let mut channels = BTreeMap::new();
        for spec in ds.schema.channels.iter().filter(|c| c.kind == ChannelKind::Dense) {
            let (mut n, mut sum, mut sq) = (0usize, 0.0, 0.0);
            for inst in &ds.instances {
                if let Some(v) = inst.channels.get(&spec.name).and_then(|c| c.dense()) {
                    n += v.len();
                    sum += v.iter().sum::<f64>();
                    sq += v.iter().map(|x| x * x).sum::<f64>();
                }
            }
            let mean = if n > 0 { sum / n as f64 } else { 0.0 };
            let var = if n > 0 { (sq / n as f64 - mean * mean).max(0.0) } else { 0.0 };
            let std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
            channels.insert(spec.name.clone(), (mean, std));
        }
        DenseStats { channels }
    }

    pub fn apply(&self, ds: &mut Dataset) {
        for inst in &mut ds.instances {
            for (name, (mean, std)) in &self.channels {
                if let Some(ChannelSeq::Dense(v)) = inst.channels.get_mut(name) {
                    v.iter_mut().for_each(|x| *x = (*x - mean) / std);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_schema() -> Schema {
        Schema::new(
            vec![ChannelSpec::category("cat", 6, 2).mcp(), ChannelSpec::dense("amount")],
            vec![TaskSpec::binary("click")],
        )
        .unwrap()
    }

    fn inst(uid: u64, toks: Vec<u32>, dense: Vec<f64>) -> Instance {
        Instance {
            user_id: uid,
            channels: BTreeMap::from([
                ("cat".to_string(), ChannelSeq::Tokens(toks)),
                ("amount".to_string(), ChannelSeq::Dense(dense)),
            ]),
            labels: BTreeMap::from([("click".to_string(), 1.0)]),
            indicators: BTreeMap::from([("click".to_string(), 1)]),
        }
    }

    #[test]
    fn dense_channel_cannot_be_mcp() {
        let mut c = ChannelSpec::dense("d");
        c.is_mcp = true;
        assert!(c.validate().is_err());
    }

    #[test]
    fn length_mismatch_names_both_channels() {
        let schema = tiny_schema();
        let bad = inst(0, vec![2; 8], vec![0.0; 7]);
        match bad.validate(&schema) {
            Err(Error::LengthMismatch {
                first,
                first_len,
                second,
                second_len,
            }) => {
                assert_eq!((first.as_str(), first_len), ("cat", 8));
                assert_eq!((second.as_str(), second_len), ("amount", 7));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn vocab_overflow_is_reported() {
        let schema = tiny_schema();
        let bad = inst(0, vec![2, 6], vec![0.0; 2]);
        assert!(matches!(bad.validate(&schema), Err(Error::Vocabulary { id: 6, .. })));
    }

    #[test]
    fn split_sizes_and_determinism() {
        let schema = tiny_schema();
        let ds = Dataset::new(schema, (0..10).map(|u| inst(u, vec![2, 3], vec![0.0, 1.0])).collect()).unwrap();
        let (tr, va, te) = split_dataset(&ds, &[0.8, 0.2], 3).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (8, 2, 0));
        let (tr_b, _, _) = split_dataset(&ds, &[0.8, 0.2], 3).unwrap();
        assert_eq!(tr, tr_b);
        let (tr_c, _, _) = split_dataset(&ds, &[0.8, 0.2], 4).unwrap();
        assert_eq!(tr_c.len(), 8);
        let ids = |d: &Dataset| d.instances.iter().map(|i| i.user_id).collect::<Vec<_>>();
        assert_ne!(ids(&tr), ids(&tr_c));
        let mut all: Vec<u64> = ids(&tr).into_iter().chain(ids(&va)).collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());

        let (tr, va, te) = split_dataset(&ds, &[1.0, 0.0], 3).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (10, 0, 0));
        assert!(split_dataset(&ds, &[1.2, -0.2], 3).is_err());
        assert!(split_dataset(&ds, &[0.5, 0.2], 3).is_err());
    }

    #[test]
    fn dense_zscore() {
        let schema = tiny_schema();
        let mut ds = Dataset::new(
            schema,
            vec![inst(0, vec![2, 3], vec![1.0, 3.0]), inst(1, vec![2, 3], vec![5.0, 7.0])],
        )
        .unwrap();
        let stats = DenseStats::fit(&ds);
        stats.apply(&mut ds);
        let vals: Vec<f64> = ds
            .instances
            .iter()
            .flat_map(|i| i.channels["amount"].dense().unwrap().to_vec())
            .collect();
        let mean = vals.iter().sum::<f64>() / 4.0;
        let var = vals.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-12);
    }
}
