//! Multi-channel feature projection.
//!
//! Per position the category embeddings, sharded id embeddings and raw dense
//! values are concatenated in schema order, projected to the model width,
//! layer-normalised and passed through a ReLU.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::data::{ChannelKind, ChannelSeq, Instance, Schema, PAD_TOKEN};
use crate::error::{Error, Result};
use crate::params::{normal_init, uniform_init, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;
pub const PROJ_INIT_STD: f64 = 0.02;

/// Instances padded to a common length and flattened to `size·max_len` rows.
/// Row `b·max_len + t` is position `t` of instance `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub max_len: usize,
    pub lengths: Vec<usize>,
    pub user_ids: Vec<u64>,
    /// Token channels padded with [`PAD_TOKEN`], dense channels with 0.
    pub channels: BTreeMap<String, ChannelSeq>,
}

impl Batch {
    pub fn from_instances(schema: &Schema, instances: &[&Instance]) -> Result<Batch> {
        if instances.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let lengths: Vec<usize> = instances.iter().map(|i| i.len()).collect();
        if let Some(pos) = lengths.iter().position(|&l| l == 0) {
            return Err(Error::Contract(format!(
                "instance of user {} has no positions",
                instances[pos].user_id
            )));
        }
        let n = *lengths.iter().max().expect("nonempty");
        let mut channels = BTreeMap::new();
        for spec in &schema.channels {
            let seq = match spec.kind {
                ChannelKind::Dense => {
                    let mut out = vec![0.0; instances.len() * n];
                    for (b, inst) in instances.iter().enumerate() {
                        let v = inst
                            .channels
                            .get(&spec.name)
                            .and_then(|c| c.dense())
                            .ok_or_else(|| Error::Schema(format!("missing dense channel `{}`", spec.name)))?;
                        check_len(&spec.name, v.len(), lengths[b])?;
                        out[b * n..b * n + v.len()].copy_from_slice(v);
                    }
                    ChannelSeq::Dense(out)
                }
                _ => {
                    let mut out = vec![PAD_TOKEN; instances.len() * n];
                    for (b, inst) in instances.iter().enumerate() {
                        let v = inst
                            .tokens(&spec.name)
                            .ok_or_else(|| Error::Schema(format!("missing token channel `{}`", spec.name)))?;
                        check_len(&spec.name, v.len(), lengths[b])?;
                        out[b * n..b * n + v.len()].copy_from_slice(v);
                    }
                    ChannelSeq::Tokens(out)
                }
            };
            channels.insert(spec.name.clone(), seq);
        }
        Ok(Batch {
            size: instances.len(),
            max_len: n,
            lengths,
            user_ids: instances.iter().map(|i| i.user_id).collect(),
            channels,
        })
    }

    pub fn rows(&self) -> usize {
        self.size * self.max_len
    }

    /// Whether each flattened row is a real (unpadded) position.
    pub fn valid(&self) -> Vec<bool> {
        let mut v = vec![false; self.rows()];
        for (b, &len) in self.lengths.iter().enumerate() {
            v[b * self.max_len..b * self.max_len + len].fill(true);
        }
        v
    }

    /// `(first row, length)` of every instance.
    pub fn segments(&self) -> Vec<(usize, usize)> {
        self.lengths
            .iter()
            .enumerate()
            .map(|(b, &l)| (b * self.max_len, l))
            .collect()
    }

    pub fn tokens(&self, channel: &str) -> Option<&[u32]> {
        self.channels.get(channel).and_then(|c| c.tokens())
    }
}

fn check_len(channel: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::LengthMismatch {
            first: "<instance>".into(),
            first_len: want,
            second: channel.to_string(),
            second_len: got,
        });
    }
    Ok(())
}

/// Contiguous row blocks of a table split into `shards` pieces:
/// `(block size c, row count of each shard)`.
pub fn shard_layout(vocab: usize, shards: usize) -> Result<(usize, Vec<usize>)> {
    if shards == 0 || vocab == 0 {
        return Err(Error::Config("vocab and shard count must be positive".into()));
    }
    let c = vocab.div_ceil(shards);
    if (shards - 1) * c >= vocab {
        return Err(Error::Config(format!(
            "{shards} shards of {c} rows leave an empty shard for vocab {vocab}"
        )));
    }
    let sizes = (0..shards).map(|s| (vocab - s * c).min(c)).collect();
    Ok((c, sizes))
}

/// Owning shard and local row of `id`.
pub fn shard_of(id: usize, block: usize) -> (usize, usize) {
    (id / block, id % block)
}

#[derive(Debug, Clone)]
enum ChannelParams {
    Table { name: String, table: ParamId },
    Sharded { name: String, shards: Vec<ParamId>, block: usize },
    Dense { name: String },
}

#[derive(Debug, Clone)]
pub struct Mfp {
    channels: Vec<ChannelParams>,
    proj_w: ParamId,
    proj_b: ParamId,
    pos: Option<ParamId>,
    ln_gain: ParamId,
    ln_bias: ParamId,
    concat_width: usize,
    d_model: usize,
}

impl Mfp {
    /// Registers MFP parameters under `mfp.`. Embedding tables are drawn as
    /// monolithic tables and then split, so values do not depend on the shard
    /// count. `positions` adds a learned positional table of that many rows.
    pub fn new(
        schema: &Schema,
        d_model: usize,
        positions: Option<usize>,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Mfp> {
        schema.validate()?;
        if d_model == 0 {
            return Err(Error::Config("d_model must be positive".into()));
        }
        let mut channels = Vec::with_capacity(schema.channels.len());
        let mut width = 0;
        for spec in &schema.channels {
            width += spec.feature_width();
            let name = spec.name.clone();
            match spec.kind {
                ChannelKind::Dense => channels.push(ChannelParams::Dense { name }),
                kind => {
                    let d = spec.feature_width();
                    let v = spec.vocab();
                    let full = uniform_init(rng, &[v, d], 1.0 / (d as f64).sqrt());
                    if kind == ChannelKind::Id {
                        let (block, sizes) = shard_layout(v, spec.num_shards)?;
                        let mut shards = Vec::with_capacity(sizes.len());
                        for (s, rows) in sizes.iter().enumerate() {
                            let start = s * block * d;
                            let t = Tensor::new(vec![*rows, d], full.data()[start..start + rows * d].to_vec())?;
                            shards.push(store.add(format!("mfp.{name}.shard{s}"), t)?);
                        }
                        channels.push(ChannelParams::Sharded { name, shards, block });
                    } else {
                        let table = store.add(format!("mfp.{name}.table"), full)?;
                        channels.push(ChannelParams::Table { name, table });
                    }
                }
            }
        }
        if width == 0 {
            return Err(Error::Config("schema has no channels".into()));
        }
        let proj_w = store.add("mfp.proj.w", normal_init(rng, &[width, d_model], PROJ_INIT_STD))?;
        let proj_b = store.add("mfp.proj.b", Tensor::zeros(&[d_model]))?;
        let pos = match positions {
            Some(n) => Some(store.add("mfp.pos", normal_init(rng, &[n, d_model], PROJ_INIT_STD))?),
            None => None,
        };
        let ln_gain = store.add("mfp.ln.gain", Tensor::full(&[d_model], 1.0))?;
        let ln_bias = store.add("mfp.ln.bias", Tensor::zeros(&[d_model]))?;
        Ok(Mfp {
            channels,
            proj_w,
            proj_b,
            pos,
            ln_gain,
            ln_bias,
            concat_width: width,
            d_model,
        })
    }

    pub fn concat_width(&self) -> usize {
        self.concat_width
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    /// Concatenated per-position features `[rows, concat_width]` before the
    /// width projection.
    pub fn concat_features(&self, g: &mut Graph, store: &ParamStore, batch: &Batch) -> Result<Var> {
        let rows = batch.rows();
        let mut pieces = Vec::with_capacity(self.channels.len());
        for ch in &self.channels {
            match ch {
                ChannelParams::Table { name, table } => {
                    let ids = token_ids(batch, name)?;
                    let t = g.param(store, *table);
                    pieces.push(g.embedding_lookup(t, &ids, name)?);
                }
                ChannelParams::Sharded { name, shards, block } => {
                    let ids = token_ids(batch, name)?;
                    let tables: Vec<Var> = shards.iter().map(|&s| g.param(store, s)).collect();
                    pieces.push(sharded_lookup(g, &tables, *block, &ids, name)?);
                }
                ChannelParams::Dense { name } => {
                    let v = batch
                        .channels
                        .get(name)
                        .and_then(|c| c.dense())
                        .ok_or_else(|| Error::Schema(format!("batch lacks dense channel `{name}`")))?;
                    pieces.push(g.constant(Tensor::new(vec![rows, 1], v.to_vec())?));
                }
            }
        }
        g.concat(&pieces, 1)
    }

    /// MFP output `[rows, d_model]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, batch: &Batch) -> Result<Var> {
        let feats = self.concat_features(g, store, batch)?;
        let w = g.param(store, self.proj_w);
        let b = g.param(store, self.proj_b);
        let h = g.matmul(feats, w)?;
        let mut h = g.add_row(h, b)?;
        if let Some(pos) = self.pos {
            let table = g.param(store, pos);
            let n = store.value(pos).shape()[0];
            if batch.max_len > n {
                return Err(Error::Config(format!(
                    "sequence length {} exceeds the {n} learned positions",
                    batch.max_len
                )));
            }
            let ids: Vec<usize> = (0..batch.rows()).map(|r| r % batch.max_len).collect();
            let p = g.gather_rows(table, &ids)?;
            h = g.add(h, p)?;
        }
        let gain = g.param(store, self.ln_gain);
        let bias = g.param(store, self.ln_bias);
        let h = g.layer_norm(h, gain, bias, LN_EPS)?;
        Ok(g.relu(h))
    }
}

fn token_ids(batch: &Batch, name: &str) -> Result<Vec<usize>> {
    batch
        .tokens(name)
        .map(|t| t.iter().map(|&x| x as usize).collect())
        .ok_or_else(|| Error::Schema(format!("batch lacks token channel `{name}`")))
}

/// Lookup of `ids` in a table stored as contiguous row blocks of size
/// `block`. Equal, value for value, to a lookup in the unsplit table.
pub fn sharded_lookup(g: &mut Graph, shards: &[Var], block: usize, ids: &[usize], channel: &str) -> Result<Var> {
    let d = *g
        .shape(*shards.first().ok_or_else(|| Error::Contract("no shards".into()))?)
        .last()
        .unwrap_or(&0);
    if shards.len() == 1 {
        return g.embedding_lookup(shards[0], ids, channel);
    }
    let vocab: usize = shards.iter().map(|&s| g.shape(s)[0]).sum();
    let mut local: Vec<(Vec<usize>, Vec<usize>)> = vec![(Vec::new(), Vec::new()); shards.len()];
    for (row, &id) in ids.iter().enumerate() {
        if id >= vocab {
            return Err(Error::Vocabulary {
                channel: channel.to_string(),
                id: id as u64,
                vocab,
            });
        }
        let (s, r) = shard_of(id, block);
        local[s].0.push(r);
        local[s].1.push(row);
    }
    let mut pieces = Vec::new();
    for (s, (rows, targets)) in local.into_iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let part = g.embedding_lookup(shards[s], &rows, channel)?;
        pieces.push((part, targets));
    }
    g.scatter_rows(&pieces, ids.len(), d)
}
