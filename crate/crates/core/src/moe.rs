//! Sparse mixture-of-experts transformer encoder.
//!
//! Every expert-routed projection picks one expert per token (top-1). The
//! router computes `logits = x·h`, `p = softmax(logits)`, selects the
//! highest logit (lowest index on ties) and scales the chosen expert's output
//! by `p[e*]`. Under [`GateConvention::Literal`] the scale is fixed at 1.
//!
//! Block layout, each sublayer wrapped as `LayerNorm(x + sublayer(x))`:
//!
//! ```text
//! x -> MoE self-attention -> MoE FFN -> MoE FFN
//! ```
//!
//! The first block reads the MFP output.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::Schema;
use crate::error::{Error, Result};
use crate::mfp::{Batch, Mfp, LN_EPS, PROJ_INIT_STD};
use crate::params::{normal_init, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const MASK_BIAS: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateConvention {
    /// Gate weight is the router probability of the chosen expert.
    #[default]
    Switch,
    /// Softmax over the single surviving logit: the weight is always 1 and
    /// the router receives no gradient.
    Literal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub blocks: usize,
    pub experts: usize,
    pub gate: GateConvention,
    /// Learned positional embeddings (off by default).
    pub positional: bool,
    /// Longest sequence kept; longer ones keep their most recent positions.
    pub max_len: usize,
    /// Weight of the load-balancing auxiliary loss (0 disables it).
    pub aux_balance_weight: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 32,
            d_ff: 64,
            heads: 2,
            blocks: 2,
            experts: 4,
            gate: GateConvention::Switch,
            positional: false,
            max_len: 256,
            aux_balance_weight: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.experts == 0 {
            return Err(Error::Config("experts must be at least 1".into()));
        }
        if self.d_model == 0 || self.d_ff == 0 || self.heads == 0 || self.max_len == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if !(self.aux_balance_weight >= 0.0) {
            return Err(Error::Config("aux_balance_weight must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Routing outcome for one token.
#[derive(Debug, Clone, PartialEq)]
pub struct GateDecision {
    pub expert: usize,
    pub weight: f64,
    pub probs: Vec<f64>,
}

fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Top-1 routing of `x[T,D]` with router `h[D,E]`.
pub fn gate(x: &Tensor, router: &Tensor, convention: GateConvention) -> Result<Vec<GateDecision>> {
    let (_, e) = router.dims2()?;
    if e == 0 {
        return Err(Error::Config("router has zero experts".into()));
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let hv = g.constant(router.clone());
    let r = route(&mut g, xv, hv, convention)?;
    let probs = g.value(r.probs).clone();
    let weights = g.value(r.gate).clone();
    Ok(r.experts
        .iter()
        .enumerate()
        .map(|(t, &expert)| GateDecision {
            expert,
            weight: weights.data()[t],
            probs: probs.row(t).to_vec(),
        })
        .collect())
}

struct Routing {
    experts: Vec<usize>,
    probs: Var,
    gate: Var,
}

fn route(g: &mut Graph, x: Var, router: Var, convention: GateConvention) -> Result<Routing> {
    let logits = g.matmul(x, router)?;
    let (t, e) = g.value(logits).dims2()?;
    if e == 0 {
        return Err(Error::Config("router has zero experts".into()));
    }
    let probs = g.softmax(logits, 1)?;
    let experts: Vec<usize> = (0..t).map(|r| argmax_lowest(g.value(logits).row(r))).collect();
    g.record_decisions(&experts);
    let gate = match convention {
        GateConvention::Switch => {
            let idx: Vec<usize> = experts.iter().enumerate().map(|(r, &x)| r * e + x).collect();
            g.pick(probs, &idx)?
        }
        GateConvention::Literal => g.constant(Tensor::full(&[t], 1.0)),
    };
    Ok(Routing { experts, probs, gate })
}

/// Per-layer routing instrumentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRouting {
    pub layer: String,
    /// Valid (unpadded) tokens sent to each expert.
    pub expert_counts: Vec<usize>,
    /// Rows routed, padding included.
    pub tokens: usize,
    /// Expert evaluations summed over rows.
    pub executions: usize,
    /// Every row evaluated by exactly one expert.
    pub exclusive: bool,
    pub min_gate: f64,
    pub max_gate: f64,
    /// Largest `|Σ_e p_e − 1|` over rows.
    pub max_prob_sum_error: f64,
}

impl LayerRouting {
    pub fn utilization(&self) -> Vec<f64> {
        let total: usize = self.expert_counts.iter().sum();
        self.expert_counts
            .iter()
            .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoutingTrace {
    pub layers: Vec<LayerRouting>,
}

impl RoutingTrace {
    /// Adds `other`'s counts into `self`, layer by layer.
    pub fn merge(&mut self, other: &RoutingTrace) {
        if self.layers.is_empty() {
            self.layers = other.layers.clone();
            return;
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.expert_counts.iter_mut().zip(&b.expert_counts) {
                *x += y;
            }
            a.tokens += b.tokens;
            a.executions += b.executions;
            a.exclusive &= b.exclusive;
            a.min_gate = a.min_gate.min(b.min_gate);
            a.max_gate = a.max_gate.max(b.max_gate);
            a.max_prob_sum_error = a.max_prob_sum_error.max(b.max_prob_sum_error);
        }
    }
}

struct Ctx<'a> {
    convention: GateConvention,
    valid: &'a [bool],
    trace: RoutingTrace,
    aux: Vec<Var>,
    aux_on: bool,
}

/// Normal router weights with every column shifted to zero mean. Inputs fed
/// through ReLU are nonnegative, so an uncentred column sum would act as a
/// per-expert bias and starve some experts from the first step.
fn router_init(rng: &mut impl Rng, d_in: usize, e: usize) -> Tensor {
    let mut h = normal_init(rng, &[d_in, e], PROJ_INIT_STD);
    for col in 0..e {
        let mean = (0..d_in).map(|r| h.at2(r, col)).sum::<f64>() / d_in as f64;
        for r in 0..d_in {
            h.data_mut()[r * e + col] -= mean;
        }
    }
    h
}

/// An expert-routed layer: a router plus per-expert parameter groups.
#[derive(Debug, Clone)]
struct Routed {
    name: String,
    router: ParamId,
    experts: Vec<Vec<ParamId>>,
}

impl Routed {
    fn new(name: String, d_in: usize, shapes: &[[usize; 2]], e: usize, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Routed> {
        let router = store.add(format!("{name}.router"), router_init(rng, d_in, e))?;
        let mut experts = Vec::with_capacity(e);
        for i in 0..e {
            let mut group = Vec::with_capacity(shapes.len());
            for (j, s) in shapes.iter().enumerate() {
                group.push(store.add(format!("{name}.expert{i}.w{j}"), normal_init(rng, s, PROJ_INIT_STD))?);
            }
            experts.push(group);
        }
        Ok(Routed { name, router, experts })
    }

    /// Routes every row of `x`, runs the chosen expert's `f` on its rows and
    /// scales the reassembled output by the gate weights.
    fn apply(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        d_out: usize,
        ctx: &mut Ctx,
        f: impl Fn(&mut Graph, &[Var], Var) -> Result<Var>,
    ) -> Result<Var> {
        let h = g.param(store, self.router);
        let r = route(g, x, h, ctx.convention)?;
        let rows = r.experts.len();
        let e = self.experts.len();
        let mut by_expert: Vec<Vec<usize>> = vec![Vec::new(); e];
        for (row, &x) in r.experts.iter().enumerate() {
            by_expert[x].push(row);
        }
        let mut hits = vec![0u32; rows];
        let mut pieces = Vec::new();
        for (i, ids) in by_expert.iter().enumerate() {
            if ids.is_empty() {
                continue;
            }
            for &row in ids {
                hits[row] += 1;
            }
            let w: Vec<Var> = self.experts[i].iter().map(|&p| g.param(store, p)).collect();
            let xs = g.gather_rows(x, ids)?;
            let y = f(g, &w, xs)?;
            pieces.push((y, ids.clone()));
        }
        let out = g.scatter_rows(&pieces, rows, d_out)?;
        let out = g.mul_col(out, r.gate)?;

        let probs = g.value(r.probs);
        let gates = g.value(r.gate).data();
        let mut counts = vec![0usize; e];
        for (row, &x) in r.experts.iter().enumerate() {
            if ctx.valid.get(row).copied().unwrap_or(true) {
                counts[x] += 1;
            }
        }
        let max_prob_sum_error = (0..rows)
            .map(|row| (probs.row(row).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max);
        ctx.trace.layers.push(LayerRouting {
            layer: self.name.clone(),
            expert_counts: counts.clone(),
            tokens: rows,
            executions: hits.iter().map(|&h| h as usize).sum(),
            exclusive: hits.iter().all(|&h| h == 1),
            min_gate: gates.iter().copied().fold(f64::INFINITY, f64::min),
            max_gate: gates.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            max_prob_sum_error,
        });
        if ctx.aux_on {
            // E · Σ_e f_e · P_e over valid rows
            let valid: Vec<usize> = (0..rows).filter(|&r| ctx.valid.get(r).copied().unwrap_or(true)).collect();
            let n = valid.len().max(1) as f64;
            let mut w = Tensor::zeros(&[1, rows]);
            for &r in &valid {
                w.data_mut()[r] = 1.0 / n;
            }
            let wv = g.constant(w);
            let mean_p = g.matmul(wv, r.probs)?;
            let frac: Vec<f64> = counts.iter().map(|&c| e as f64 * c as f64 / n).collect();
            ctx.aux.push(g.weighted_sum(mean_p, &frac)?);
        }
        Ok(out)
    }
}

fn ffn(g: &mut Graph, w: &[Var], x: Var) -> Result<Var> {
    let h = g.matmul(x, w[0])?;
    let h = g.relu(h);
    g.matmul(h, w[1])
}

fn linear(g: &mut Graph, w: &[Var], x: Var) -> Result<Var> {
    g.matmul(x, w[0])
}

#[derive(Debug, Clone)]
struct Head {
    q: Routed,
    k: Routed,
    v: Routed,
}

#[derive(Debug, Clone)]
struct Block {
    heads: Vec<Head>,
    out_w: ParamId,
    out_b: ParamId,
    ffn: [Routed; 2],
    ln: [(ParamId, ParamId); 3],
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: ModelConfig,
    pub mfp: Mfp,
    blocks: Vec<Block>,
}

/// Encoder result for one batch.
#[derive(Debug)]
pub struct EncoderOutput {
    /// `[rows, d_model]`, row layout as in [`Batch`].
    pub hidden: Var,
    pub trace: RoutingTrace,
    /// Weighted load-balancing loss, when enabled.
    pub aux_loss: Option<Var>,
}

impl Encoder {
    /// Registers MFP parameters under `mfp.` and block parameters under
    /// `enc.`.
    pub fn new(schema: &Schema, config: &ModelConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Encoder> {
        config.validate()?;
        let d = config.d_model;
        let dk = config.d_k();
        let e = config.experts;
        let mfp = Mfp::new(schema, d, config.positional.then_some(config.max_len), store, rng)?;
        let mut blocks = Vec::with_capacity(config.blocks);
        for l in 0..config.blocks {
            let p = format!("enc.block{l}");
            let mut heads = Vec::with_capacity(config.heads);
            for h in 0..config.heads {
                let mk = |s: &str, store: &mut ParamStore, rng: &mut _| {
                    Routed::new(format!("{p}.msa.head{h}.{s}"), d, &[[d, dk]], e, store, rng)
                };
                heads.push(Head {
                    q: mk("q", store, rng)?,
                    k: mk("k", store, rng)?,
                    v: mk("v", store, rng)?,
                });
            }
            let out_w = store.add(format!("{p}.msa.out.w"), normal_init(rng, &[d, d], PROJ_INIT_STD))?;
            let out_b = store.add(format!("{p}.msa.out.b"), Tensor::zeros(&[d]))?;
            let shapes = [[d, config.d_ff], [config.d_ff, d]];
            let ffn = [
                Routed::new(format!("{p}.ffn0"), d, &shapes, e, store, rng)?,
                Routed::new(format!("{p}.ffn1"), d, &shapes, e, store, rng)?,
            ];
            let mut ln = Vec::with_capacity(3);
            for j in 0..3 {
                ln.push((
                    store.add(format!("{p}.ln{j}.gain"), Tensor::full(&[d], 1.0))?,
                    store.add(format!("{p}.ln{j}.bias"), Tensor::zeros(&[d]))?,
                ));
            }
            blocks.push(Block {
                heads,
                out_w,
                out_b,
                ffn,
                ln: [ln[0], ln[1], ln[2]],
            });
        }
        Ok(Encoder {
            config: config.clone(),
            mfp,
            blocks,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, batch: &Batch) -> Result<EncoderOutput> {
        let valid = batch.valid();
        let mut ctx = Ctx {
            convention: self.config.gate,
            valid: &valid,
            trace: RoutingTrace::default(),
            aux: Vec::new(),
            aux_on: self.config.aux_balance_weight > 0.0,
        };
        let d = self.config.d_model;
        let dk = self.config.d_k();
        let mask = attention_mask(batch);
        let mut x = self.mfp.forward(g, store, batch)?;
        for block in &self.blocks {
            let mut heads = Vec::with_capacity(block.heads.len());
            for head in &block.heads {
                let q = head.q.apply(g, store, x, dk, &mut ctx, linear)?;
                let k = head.k.apply(g, store, x, dk, &mut ctx, linear)?;
                let v = head.v.apply(g, store, x, dk, &mut ctx, linear)?;
                heads.push(attention(g, q, k, v, batch, &mask)?);
            }
            let att = finish_attention(g, store, block, &heads)?;
            x = residual_norm(g, store, x, att, block.ln[0])?;
            for (j, f) in block.ffn.iter().enumerate() {
                let y = f.apply(g, store, x, d, &mut ctx, ffn)?;
                x = residual_norm(g, store, x, y, block.ln[j + 1])?;
            }
        }
        let aux_loss = if ctx.aux.is_empty() {
            None
        } else {
            let s = g.stack(&ctx.aux)?;
            let s = g.sum(s);
            Some(g.scale(s, self.config.aux_balance_weight))
        };
        Ok(EncoderOutput {
            hidden: x,
            trace: ctx.trace,
            aux_loss,
        })
    }

    /// The same network with every routed projection replaced by a plain
    /// matmul with expert 0. Only defined for single-expert models.
    pub fn forward_dense_reference(&self, g: &mut Graph, store: &ParamStore, batch: &Batch) -> Result<Var> {
        if self.config.experts != 1 {
            return Err(Error::Config("dense reference needs exactly one expert".into()));
        }
        let mask = attention_mask(batch);
        let mut x = self.mfp.forward(g, store, batch)?;
        let expert0 = |g: &mut Graph, r: &Routed| -> Vec<Var> { r.experts[0].iter().map(|&p| g.param(store, p)).collect() };
        for block in &self.blocks {
            let mut heads = Vec::with_capacity(block.heads.len());
            for head in &block.heads {
                let wq = expert0(g, &head.q);
                let wk = expert0(g, &head.k);
                let wv = expert0(g, &head.v);
                let q = g.matmul(x, wq[0])?;
                let k = g.matmul(x, wk[0])?;
                let v = g.matmul(x, wv[0])?;
                heads.push(attention(g, q, k, v, batch, &mask)?);
            }
            let att = finish_attention(g, store, block, &heads)?;
            x = residual_norm(g, store, x, att, block.ln[0])?;
            for (j, f) in block.ffn.iter().enumerate() {
                let w = expert0(g, f);
                let y = ffn(g, &w, x)?;
                x = residual_norm(g, store, x, y, block.ln[j + 1])?;
            }
        }
        Ok(x)
    }

    /// Names of every encoder parameter (MFP and blocks).
    pub fn is_encoder_param(name: &str) -> bool {
        name.starts_with("mfp.") || name.starts_with("enc.")
    }
}

/// Per-instance `[N,N]` additive key masks.
fn attention_mask(batch: &Batch) -> Vec<Tensor> {
    let n = batch.max_len;
    batch
        .lengths
        .iter()
        .map(|&len| Tensor::from_fn(&[n, n], |i| if i % n >= len { MASK_BIAS } else { 0.0 }))
        .collect()
}

/// Scaled dot-product attention of one head, separately per instance.
fn attention(g: &mut Graph, q: Var, k: Var, v: Var, batch: &Batch, mask: &[Tensor]) -> Result<Var> {
    let n = batch.max_len;
    let dk = g.shape(q)[1];
    let scale = 1.0 / (dk as f64).sqrt();
    let mut outs = Vec::with_capacity(batch.size);
    for (b, m) in mask.iter().enumerate() {
        let qb = g.slice(q, 0, b * n, n)?;
        let kb = g.slice(k, 0, b * n, n)?;
        let vb = g.slice(v, 0, b * n, n)?;
        let kt = g.transpose(kb)?;
        let s = g.matmul(qb, kt)?;
        let s = g.scale(s, scale);
        let mv = g.constant(m.clone());
        let s = g.add(s, mv)?;
        let a = g.softmax(s, 1)?;
        outs.push(g.matmul(a, vb)?);
    }
    if outs.len() == 1 {
        return Ok(outs[0]);
    }
    g.concat(&outs, 0)
}

fn finish_attention(g: &mut Graph, store: &ParamStore, block: &Block, heads: &[Var]) -> Result<Var> {
    let cat = if heads.len() == 1 { heads[0] } else { g.concat(heads, 1)? };
    let w = g.param(store, block.out_w);
    let b = g.param(store, block.out_b);
    let y = g.matmul(cat, w)?;
    g.add_row(y, b)
}

fn residual_norm(g: &mut Graph, store: &ParamStore, x: Var, y: Var, ln: (ParamId, ParamId)) -> Result<Var> {
    let s = g.add(x, y)?;
    let gain = g.param(store, ln.0);
    let bias = g.param(store, ln.1);
    g.layer_norm(s, gain, bias, LN_EPS)
}

/// One expert-routed FFN layer on its own, for experiments on routing.
#[derive(Debug, Clone)]
pub struct MoeFfnLayer {
    routed: Routed,
    d_out: usize,
    convention: GateConvention,
}

impl MoeFfnLayer {
    pub fn new(
        name: &str,
        d_in: usize,
        d_ff: usize,
        d_out: usize,
        experts: usize,
        convention: GateConvention,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<MoeFfnLayer> {
        if experts == 0 {
            return Err(Error::Config("experts must be at least 1".into()));
        }
        let routed = Routed::new(name.to_string(), d_in, &[[d_in, d_ff], [d_ff, d_out]], experts, store, rng)?;
        Ok(MoeFfnLayer {
            routed,
            d_out,
            convention,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<(Var, LayerRouting)> {
        let mut ctx = Ctx {
            convention: self.convention,
            valid: &[],
            trace: RoutingTrace::default(),
            aux: Vec::new(),
            aux_on: false,
        };
        let y = self.routed.apply(g, store, x, self.d_out, &mut ctx, ffn)?;
        Ok((y, ctx.trace.layers.pop().expect("one layer")))
    }

    pub fn router(&self) -> ParamId {
        self.routed.router
    }

    /// `(w_in, w_out)` of expert `e`.
    pub fn expert(&self, e: usize) -> (ParamId, ParamId) {
        (self.routed.experts[e][0], self.routed.experts[e][1])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};
    use crate::gradcheck::{check_params, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config(experts: usize) -> ModelConfig {
        ModelConfig {
            d_model: 8,
            d_ff: 12,
            heads: 2,
            blocks: 2,
            experts,
            ..ModelConfig::default()
        }
    }

    fn tiny_data(n: usize, len: usize) -> crate::data::Dataset {
        let cfg = SyntheticConfig {
            num_instances: n,
            mean_length: len,
            length_jitter: 0.5,
            category_vocab: 8,
            id_vocab: 20,
            id_shards: 2,
            embed_dim: 3,
            ..SyntheticConfig::default()
        };
        generate_synthetic(&cfg, 9).unwrap()
    }

    #[test]
    fn gate_examples() {
        let x = Tensor::matrix(&[&[1.0]]);
        let h = Tensor::matrix(&[&[2.0, 1.0, -1.0]]);
        let d = &gate(&x, &h, GateConvention::Switch).unwrap()[0];
        assert_eq!(d.expert, 0);
        assert!((d.weight - 0.705_384_5).abs() < 1e-6);
        let tie = gate(&x, &Tensor::matrix(&[&[3.0, 3.0]]), GateConvention::Switch).unwrap();
        assert_eq!(tie[0].expert, 0);
        let one = gate(&x, &Tensor::matrix(&[&[-4.0]]), GateConvention::Switch).unwrap();
        assert_eq!((one[0].expert, one[0].weight), (0, 1.0));
        let lit = gate(&x, &h, GateConvention::Literal).unwrap();
        assert_eq!(lit[0].weight, 1.0);
        let none = Tensor::new(vec![1, 0], vec![]).unwrap();
        assert!(matches!(gate(&x, &none, GateConvention::Switch), Err(Error::Config(_))));
    }

    #[test]
    fn hand_set_router_forces_expert_one() {
        // router logits [0, ln 1.5] -> p = [0.4, 0.6], expert 1, gate 0.6
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = MoeFfnLayer::new("f", 3, 2, 3, 2, GateConvention::Switch, &mut store, &mut rng).unwrap();
        let x = [1.0, -2.0, 0.5];
        *store.value_mut(layer.router()) = Tensor::matrix(&[&[0.0, 1.5f64.ln()], &[0.0, 0.0], &[0.0, 0.0]]);
        let (wi, wo) = layer.expert(1);
        *store.value_mut(wi) = Tensor::matrix(&[&[1.0, 0.5], &[0.25, -1.0], &[2.0, 0.0]]);
        *store.value_mut(wo) = Tensor::matrix(&[&[1.0, 2.0, 3.0], &[-1.0, 0.0, 1.0]]);
        let mut g = Graph::new();
        let xv = g.constant(Tensor::matrix(&[&x]));
        let (y, stats) = layer.forward(&mut g, &store, xv).unwrap();
        // w_i·x = [1 - 0.5 + 1, 0.5 + 2 + 0] = [1.5, 2.5]; relu keeps both
        // w_o·h = [1.5 - 2.5, 3.0, 4.5 + 2.5] = [-1, 3, 7]
        let want = [-0.6, 1.8, 4.2];
        for (a, b) in g.value(y).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert_eq!(stats.expert_counts, vec![0, 1]);
        let zero = g.constant(Tensor::zeros(&[1, 3]));
        let (y0, _) = layer.forward(&mut g, &store, zero).unwrap();
        assert!(g.value(y0).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn collapse_to_dense_is_bit_exact() {
        let ds = tiny_data(6, 5);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&ds.schema, &tiny_config(1), &mut store, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let refs: Vec<_> = ds.instances.iter().collect();
        let batch = Batch::from_instances(&ds.schema, &refs).unwrap();
        let mut g = Graph::new();
        let moe = enc.forward(&mut g, &store, &batch).unwrap().hidden;
        let dense = enc.forward_dense_reference(&mut g, &store, &batch).unwrap();
        assert_eq!(g.value(moe), g.value(dense));
    }

    #[test]
    fn zero_blocks_returns_mfp_output() {
        let ds = tiny_data(2, 4);
        let mut store = ParamStore::new();
        let cfg = ModelConfig {
            blocks: 0,
            ..tiny_config(2)
        };
        let enc = Encoder::new(&ds.schema, &cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let refs: Vec<_> = ds.instances.iter().collect();
        let batch = Batch::from_instances(&ds.schema, &refs).unwrap();
        let mut g = Graph::new();
        let h = enc.forward(&mut g, &store, &batch).unwrap().hidden;
        let m = enc.mfp.forward(&mut g, &store, &batch).unwrap();
        assert_eq!(g.value(h), g.value(m));
    }

    #[test]
    fn padding_does_not_change_valid_rows() {
        let ds = tiny_data(2, 6);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&ds.schema, &tiny_config(3), &mut store, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let a = &ds.instances[0];
        let mut long = ds.instances[1].clone();
        for seq in long.channels.values_mut() {
            match seq {
                crate::data::ChannelSeq::Tokens(t) => t.resize(a.len() + 5, 2),
                crate::data::ChannelSeq::Dense(d) => d.resize(a.len() + 5, 0.0),
            }
        }
        let solo = Batch::from_instances(&ds.schema, &[a]).unwrap();
        let padded = Batch::from_instances(&ds.schema, &[a, &long]).unwrap();
        let mut g = Graph::new();
        let h1 = enc.forward(&mut g, &store, &solo).unwrap().hidden;
        let h2 = enc.forward(&mut g, &store, &padded).unwrap().hidden;
        let n = a.len();
        assert_eq!(&g.value(h1).data()[..n * 8], &g.value(h2).data()[..n * 8]);
    }

    #[test]
    fn masked_keys_get_zero_weight() {
        let q = Tensor::matrix(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        let mut g = Graph::new();
        let qv = g.constant(q.clone());
        let batch = Batch {
            size: 1,
            max_len: 3,
            lengths: vec![2],
            user_ids: vec![0],
            channels: Default::default(),
        };
        let mask = attention_mask(&batch);
        let v = g.constant(Tensor::matrix(&[&[1.0, 0.0], &[0.0, 1.0], &[1e6, 1e6]]));
        let out = attention(&mut g, qv, qv, v, &batch, &mask).unwrap();
        assert!(g.value(out).data().iter().all(|x| x.abs() <= 1.0));
    }

    #[test]
    fn routing_invariants_and_gradients() {
        let ds = tiny_data(3, 4);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&ds.schema, &tiny_config(3), &mut store, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let refs: Vec<_> = ds.instances.iter().take(2).collect();
        let batch = Batch::from_instances(&ds.schema, &refs).unwrap();
        let mut g = Graph::new();
        let out = enc.forward(&mut g, &store, &batch).unwrap();
        assert_eq!(out.trace.layers.len(), 2 * (3 * 2 + 2));
        for l in &out.trace.layers {
            assert!(l.exclusive);
            assert_eq!(l.executions, l.tokens);
            assert!(l.min_gate > 0.0 && l.max_gate <= 1.0);
            assert!(l.max_prob_sum_error <= 1e-12);
        }
        let opts = GradCheckOptions {
            max_coords_per_tensor: Some(6),
            ..GradCheckOptions::default()
        };
        let report = check_params(&store, &opts, |g, s| {
            let h = enc.forward(g, s, &batch)?.hidden;
            let sq = g.square(h);
            let w: Vec<f64> = (0..g.value(sq).numel()).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
            g.weighted_sum(sq, &w)
        })
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn aux_loss_is_one_when_balanced_counts_meet_uniform_probs() {
        let ds = tiny_data(2, 4);
        let mut store = ParamStore::new();
        let cfg = ModelConfig {
            aux_balance_weight: 1.0,
            blocks: 1,
            ..tiny_config(2)
        };
        let enc = Encoder::new(&ds.schema, &cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            if store.get(id).name.ends_with(".router") {
                store.value_mut(id).fill(0.0);
            }
        }
        let refs: Vec<_> = ds.instances.iter().collect();
        let batch = Batch::from_instances(&ds.schema, &refs).unwrap();
        let mut g = Graph::new();
        let out = enc.forward(&mut g, &store, &batch).unwrap();
        // all tokens on expert 0 with p = 0.5 each: E·(1·0.5) = 1 per layer
        let aux = g.value(out.aux_loss.unwrap()).data()[0];
        assert!((aux - 8.0).abs() < 1e-12, "{aux}");
    }
}
