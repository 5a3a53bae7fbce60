//! Seeded synthetic behaviour data with planted, learnable structure.
//!
//! * Category channels draw tokens from the high or low half of their
//!   vocabulary with a per-user propensity, so the high-token fraction is a
//!   per-user feature.
//! * Dense channels are Gaussian around a per-user mean.
//! * Id channels are uniform noise.
//! * MCP channels are a fixed permutation of a source category channel at the
//!   same position, so masked tokens are exactly recoverable from context.
//! * Task labels threshold a linear rule over those features.

use std::collections::BTreeMap;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ChannelSeq, ChannelSpec, Dataset, Instance, Objective, Schema, TaskSpec, FIRST_TOKEN};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    SiupdLike,
    PaytoolLike,
    McpLike,
    FortuneLike,
    Custom,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "siupd-like" => Preset::SiupdLike,
            "paytool-like" => Preset::PaytoolLike,
            "mcp-like" => Preset::McpLike,
            "fortune-like" => Preset::FortuneLike,
            "custom" => Preset::Custom,
            other => return Err(Error::Config(format!("unknown preset `{other}`"))),
        })
    }
}

impl Preset {
    pub const NAMED: [Preset; 4] = [Preset::SiupdLike, Preset::PaytoolLike, Preset::McpLike, Preset::FortuneLike];

    pub fn name(self) -> &'static str {
        match self {
            Preset::SiupdLike => "siupd-like",
            Preset::PaytoolLike => "paytool-like",
            Preset::McpLike => "mcp-like",
            Preset::FortuneLike => "fortune-like",
            Preset::Custom => "custom",
        }
    }

    /// Generator settings for the preset. `Custom` returns the default config.
    pub fn config(self) -> SyntheticConfig {
        let base = SyntheticConfig::default();
        match self {
            // 4 category + 2 id + 3 dense + 2 mcp = 11 channels
            Preset::SiupdLike => SyntheticConfig {
                num_instances: 10_000,
                mean_length: 150,
                length_jitter: 0.2,
                category_channels: 4,
                id_channels: 2,
                dense_channels: 3,
                mcp_channels: 2,
                task_mode: TaskMode::Independent(2),
                ..base
            },
            // 5 + 2 + 3 + 2 = 12
            Preset::PaytoolLike => SyntheticConfig {
                num_instances: 10_000,
                mean_length: 128,
                category_channels: 5,
                id_channels: 2,
                dense_channels: 3,
                mcp_channels: 2,
                task_mode: TaskMode::Independent(5),
                ..base
            },
            // 60 + 10 + 30 + 3 = 103
            Preset::McpLike => SyntheticConfig {
                num_instances: 1_000,
                mean_length: 128,
                category_channels: 60,
                id_channels: 10,
                dense_channels: 30,
                mcp_channels: 3,
                task_mode: TaskMode::Independent(1),
                ..base
            },
            // 500 + 50 + 230 + 6 = 786
            Preset::FortuneLike => SyntheticConfig {
                num_instances: 200,
                mean_length: 128,
                category_channels: 500,
                id_channels: 50,
                dense_channels: 230,
                mcp_channels: 6,
                task_mode: TaskMode::Independent(2),
                ..base
            },
            Preset::Custom => base,
        }
    }
}

/// A feature the label rules can depend on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FeatureRef {
    /// `2·(fraction of high-half tokens) − 1` of a category channel.
    HighFraction(usize),
    /// Mean value of a dense channel.
    DenseMean(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRule {
    pub objective: Objective,
    pub terms: Vec<(FeatureRef, f64)>,
    /// Gaussian noise added to the score before thresholding.
    pub noise_std: f64,
    /// Probability of flipping a binary label after thresholding.
    pub flip_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TaskMode {
    /// `k` binary tasks, task `i` driven by category channel `i` and dense
    /// channel `i` (modulo channel counts).
    Independent(usize),
    /// Two binary tasks driven by the same category feature with opposite
    /// sign. The second task also depends on a private dense feature and
    /// carries label noise `flip_prob`.
    Conflict { flip_prob: f64 },
    Rules(Vec<TaskRule>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_instances: usize,
    pub mean_length: usize,
    /// Lengths are uniform in `mean·(1 ± jitter)`.
    pub length_jitter: f64,
    pub category_channels: usize,
    pub category_vocab: usize,
    pub id_channels: usize,
    pub id_vocab: usize,
    pub id_shards: usize,
    pub dense_channels: usize,
    pub embed_dim: usize,
    /// Copy channels of category channels `0, 1, ...` (cyclic).
    pub mcp_channels: usize,
    pub task_mode: TaskMode,
    /// Probability that a task's indicator is 1.
    pub indicator_rate: f64,
    pub label_noise_std: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_instances: 10_000,
            mean_length: 128,
            length_jitter: 0.0,
            category_channels: 2,
            category_vocab: 32,
            id_channels: 1,
            id_vocab: 1_000,
            id_shards: 4,
            dense_channels: 1,
            embed_dim: 4,
            mcp_channels: 1,
            task_mode: TaskMode::Independent(1),
            indicator_rate: 1.0,
            label_noise_std: 0.1,
        }
    }
}

impl SyntheticConfig {
    /// One source category channel and its masked copy; no tasks.
    pub fn copy_task(num_instances: usize, length: usize, vocab: usize) -> Self {
        SyntheticConfig {
            num_instances,
            mean_length: length,
            length_jitter: 0.0,
            category_channels: 1,
            category_vocab: vocab,
            id_channels: 0,
            dense_channels: 0,
            mcp_channels: 1,
            task_mode: TaskMode::Rules(Vec::new()),
            ..SyntheticConfig::default()
        }
    }

    /// Two opposite-sign tasks over a shared feature.
    pub fn conflict(num_instances: usize, length: usize, flip_prob: f64) -> Self {
        SyntheticConfig {
            num_instances,
            mean_length: length,
            category_channels: 2,
            id_channels: 0,
            dense_channels: 2,
            mcp_channels: 0,
            task_mode: TaskMode::Conflict { flip_prob },
            ..SyntheticConfig::default()
        }
    }

    pub fn num_channels(&self) -> usize {
        self.category_channels + self.id_channels + self.dense_channels + self.mcp_channels
    }

    fn rules(&self) -> Vec<TaskRule> {
        let cat = self.category_channels.max(1);
        let dense = self.dense_channels;
        match &self.task_mode {
            TaskMode::Independent(k) => (0..*k)
                .map(|i| {
                    let mut terms = vec![(FeatureRef::HighFraction(i % cat), 3.0)];
                    if dense > 0 {
                        terms.push((FeatureRef::DenseMean(i % dense), 1.0));
                    }
                    TaskRule {
                        objective: Objective::BinaryClassification,
                        terms,
                        noise_std: self.label_noise_std,
                        flip_prob: 0.0,
                    }
                })
                .collect(),
            TaskMode::Conflict { flip_prob } => {
                let mut second = vec![(FeatureRef::HighFraction(0), -3.0)];
                if dense > 0 {
                    second.push((FeatureRef::DenseMean(0), 2.0));
                }
                vec![
                    TaskRule {
                        objective: Objective::BinaryClassification,
                        terms: vec![(FeatureRef::HighFraction(0), 3.0)],
                        noise_std: self.label_noise_std,
                        flip_prob: 0.0,
                    },
                    TaskRule {
                        objective: Objective::BinaryClassification,
                        terms: second,
                        noise_std: self.label_noise_std,
                        flip_prob: *flip_prob,
                    },
                ]
            }
            TaskMode::Rules(r) => r.clone(),
        }
    }

    fn schema(&self) -> Result<Schema> {
        let d = self.embed_dim;
        let mut channels = Vec::with_capacity(self.num_channels());
        for i in 0..self.category_channels {
            channels.push(ChannelSpec::category(format!("cat{i}"), self.category_vocab, d));
        }
        for i in 0..self.id_channels {
            channels.push(ChannelSpec::id(format!("id{i}"), self.id_vocab, d, self.id_shards));
        }
        for i in 0..self.dense_channels {
            channels.push(ChannelSpec::dense(format!("dense{i}")));
        }
        for i in 0..self.mcp_channels {
            channels.push(ChannelSpec::category(format!("mcp{i}"), self.category_vocab, d).mcp());
        }
        let tasks = self
            .rules()
            .iter()
            .enumerate()
            .map(|(k, r)| TaskSpec {
                name: format!("task{k}"),
                objective: r.objective,
            })
            .collect();
        Schema::new(channels, tasks)
    }

    fn validate(&self) -> Result<()> {
        if self.mean_length == 0 {
            return Err(Error::Config("mean_length must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.length_jitter) {
            return Err(Error::Config("length_jitter must lie in [0, 1)".into()));
        }
        if self.mcp_channels > 0 && self.category_channels == 0 {
            return Err(Error::Config("MCP copy channels need a category channel".into()));
        }
        if !(0.0..=1.0).contains(&self.indicator_rate) {
            return Err(Error::Config("indicator_rate must lie in [0, 1]".into()));
        }
        for rule in self.rules() {
            for (f, _) in &rule.terms {
                let ok = match *f {
                    FeatureRef::HighFraction(c) => c < self.category_channels,
                    FeatureRef::DenseMean(c) => c < self.dense_channels,
                };
                if !ok {
                    return Err(Error::Config(format!("task rule refers to missing feature {f:?}")));
                }
            }
        }
        Ok(())
    }
}

/// Generates a validated dataset. Identical `(config, seed)` give identical
/// datasets.
pub fn generate_synthetic(config: &SyntheticConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let schema = config.schema()?;
    let rules = config.rules();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");

    let v = config.category_vocab as u32;
    let half = FIRST_TOKEN + (v - FIRST_TOKEN) / 2;
    let perms: Vec<Vec<u32>> = (0..config.mcp_channels)
        .map(|_| {
            let mut p: Vec<u32> = (FIRST_TOKEN..v).collect();
            p.shuffle(&mut rng);
            p
        })
        .collect();

    let lo = (config.mean_length as f64 * (1.0 - config.length_jitter)).round().max(1.0) as usize;
    let hi = (config.mean_length as f64 * (1.0 + config.length_jitter)).round() as usize;

    let mut instances = Vec::with_capacity(config.num_instances);
    for user in 0..config.num_instances {
        let len = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let mut channels = BTreeMap::new();
        let mut high_frac = Vec::with_capacity(config.category_channels);
        let mut cat_tokens = Vec::with_capacity(config.category_channels);
        for i in 0..config.category_channels {
            let p: f64 = rng.random();
            let toks: Vec<u32> = (0..len)
                .map(|_| {
                    if rng.random::<f64>() < p {
                        rng.random_range(half..v)
                    } else {
                        rng.random_range(FIRST_TOKEN..half)
                    }
                })
                .collect();
            let frac = toks.iter().filter(|&&t| t >= half).count() as f64 / len as f64;
            high_frac.push(2.0 * frac - 1.0);
            channels.insert(format!("cat{i}"), ChannelSeq::Tokens(toks.clone()));
            cat_tokens.push(toks);
        }
        for i in 0..config.id_channels {
            let toks = (0..len)
                .map(|_| rng.random_range(FIRST_TOKEN..config.id_vocab as u32))
                .collect();
            channels.insert(format!("id{i}"), ChannelSeq::Tokens(toks));
        }
        let mut dense_mean = Vec::with_capacity(config.dense_channels);
        for i in 0..config.dense_channels {
            let mu: f64 = std_normal.sample(&mut rng);
            let vals: Vec<f64> = (0..len).map(|_| mu + std_normal.sample(&mut rng)).collect();
            dense_mean.push(vals.iter().sum::<f64>() / len as f64);
            channels.insert(format!("dense{i}"), ChannelSeq::Dense(vals));
        }
        for (i, perm) in perms.iter().enumerate() {
            let src = &cat_tokens[i % config.category_channels];
            let toks = src.iter().map(|&t| perm[(t - FIRST_TOKEN) as usize]).collect();
            channels.insert(format!("mcp{i}"), ChannelSeq::Tokens(toks));
        }

        let mut labels = BTreeMap::new();
        let mut indicators = BTreeMap::new();
        for (k, rule) in rules.iter().enumerate() {
            let score: f64 = rule
                .terms
                .iter()
                .map(|(f, w)| {
                    w * match *f {
                        FeatureRef::HighFraction(c) => high_frac[c],
                        FeatureRef::DenseMean(c) => dense_mean[c],
                    }
                })
                .sum::<f64>()
                + rule.noise_std * std_normal.sample(&mut rng);
            let label = match rule.objective {
                Objective::Regression => score,
                Objective::BinaryClassification => {
                    let y = score > 0.0;
                    let flip = rng.random::<f64>() < rule.flip_prob;
                    f64::from(u8::from(y != flip))
                }
            };
            let delta = u8::from(rng.random::<f64>() < config.indicator_rate);
            labels.insert(format!("task{k}"), label);
            indicators.insert(format!("task{k}"), delta);
        }
        instances.push(Instance {
            user_id: user as u64,
            channels,
            labels,
            indicators,
        });
    }
    Dataset::new(schema, instances)
}
