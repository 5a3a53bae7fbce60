//! Masked channel prediction (MCP) pre-training.
//!
//! Tokens of the MCP channels are replaced by [`MASK_TOKEN`] at random
//! positions and a per-channel linear head predicts the originals from the
//! encoder output. Each MCP channel is one task of the weighted multi-task
//! loss.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::checkpoint::RngState;
use crate::data::{ChannelSeq, Dataset, Instance, Objective, Schema, MASK_TOKEN};
use crate::error::{Error, Result};
use crate::metrics::MetricsRecord;
use crate::mfp::{Batch, PROJ_INIT_STD};
use crate::model::SuperMoe;
use crate::moe::RoutingTrace;
use crate::multitask::{total_loss, LambdaWeights};
use crate::optim::{warmup_lr, Adam, AdamConfig};
use crate::params::{normal_init, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_MASK_RATE: f64 = 0.15;

/// Masked positions of each MCP channel with their original tokens.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MaskPlan {
    pub masked: BTreeMap<String, Vec<(usize, u32)>>,
}

impl MaskPlan {
    pub fn count(&self) -> usize {
        self.masked.values().map(|v| v.len()).sum()
    }
}

/// Deterministic per-instance masking stream, independent of batching.
pub fn mask_rng(seed: u64, epoch: u64, user_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ user_id);
    rng
}

fn draw(n: usize, rate: f64, rng: &mut impl Rng) -> Vec<usize> {
    (0..n).filter(|_| rng.random::<f64>() < rate).collect()
}

/// Masks each position of each listed channel independently with
/// probability `rate`. When `rate > 0` and nothing was drawn the draw is
/// repeated once; if that also comes up empty one uniformly chosen position
/// is masked.
pub fn apply_mask(inst: &Instance, channels: &[String], rate: f64, rng: &mut impl Rng) -> Result<(Instance, MaskPlan)> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Config(format!("mask rate {rate} outside [0, 1]")));
    }
    let mut out = inst.clone();
    let mut plan = MaskPlan::default();
    for ch in channels {
        let Some(ChannelSeq::Tokens(toks)) = out.channels.get_mut(ch) else {
            return Err(Error::Schema(format!("MCP channel `{ch}` missing or not tokenised")));
        };
        let n = toks.len();
        let mut pos = draw(n, rate, rng);
        if pos.is_empty() && rate > 0.0 && n > 0 {
            pos = draw(n, rate, rng);
            if pos.is_empty() {
                pos = vec![rng.random_range(0..n)];
            }
        }
        let entries = pos.iter().map(|&p| (p, toks[p])).collect();
        for &p in &pos {
            toks[p] = MASK_TOKEN;
        }
        plan.masked.insert(ch.clone(), entries);
    }
    Ok((out, plan))
}

/// Linear token classifiers, one per MCP channel.
#[derive(Debug, Clone)]
pub struct McpHeads {
    heads: Vec<(String, ParamId, ParamId)>,
}

impl McpHeads {
    pub fn new(schema: &Schema, d_model: usize, store: &mut ParamStore, rng: &mut impl Rng) -> Result<McpHeads> {
        let mut heads = Vec::new();
        for spec in schema.mcp_channels() {
            let v = spec.vocab();
            let w = store.add(format!("mcp.{}.w", spec.name), normal_init(rng, &[d_model, v], PROJ_INIT_STD))?;
            let b = store.add(format!("mcp.{}.b", spec.name), Tensor::zeros(&[v]))?;
            heads.push((spec.name.clone(), w, b));
        }
        Ok(McpHeads { heads })
    }

    pub fn channels(&self) -> Vec<String> {
        self.heads.iter().map(|h| h.0.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    /// Token logits `[rows.len(), V]` of head `i` at the given hidden rows.
    pub fn logits(&self, g: &mut Graph, store: &ParamStore, hidden: Var, i: usize, rows: &[usize]) -> Result<Var> {
        let (_, w, b) = &self.heads[i];
        let h = g.gather_rows(hidden, rows)?;
        let wv = g.param(store, *w);
        let bv = g.param(store, *b);
        let z = g.matmul(h, wv)?;
        g.add_row(z, bv)
    }
}

fn picks(g: &Graph, logits: Var, targets: &[(usize, u32)]) -> Result<Vec<usize>> {
    let (m, v) = g.value(logits).dims2()?;
    targets
        .iter()
        .map(|&(r, t)| {
            if r >= m || t as usize >= v {
                Err(Error::Contract(format!("target ({r}, {t}) outside logits [{m}, {v}]")))
            } else {
                Ok(r * v + t as usize)
            }
        })
        .collect()
}

/// `Σ log softmax(logits[r])[t]` over the `(row, true token)` targets.
pub fn mcp_log_prob(g: &mut Graph, logits: Var, targets: &[(usize, u32)]) -> Result<Var> {
    let idx = picks(g, logits, targets)?;
    let ls = g.log_softmax(logits, 1)?;
    let p = g.pick(ls, &idx)?;
    Ok(g.sum(p))
}

/// Mean negative log-likelihood of the true tokens.
pub fn mcp_loss(g: &mut Graph, logits: Var, targets: &[(usize, u32)]) -> Result<Var> {
    if targets.is_empty() {
        return Err(Error::Contract("MCP loss over zero masked positions".into()));
    }
    let lp = mcp_log_prob(g, logits, targets)?;
    Ok(g.scale(lp, -1.0 / targets.len() as f64))
}

/// `(1/Σδ) Σ δ_i loss_i` on plain values; `None` when no sample is indicated.
pub fn indicator_mean(losses: &[f64], indicators: &[f64]) -> Option<f64> {
    let n: f64 = indicators.iter().sum();
    (n > 0.0).then(|| losses.iter().zip(indicators).map(|(l, d)| l * d).sum::<f64>() / n)
}

/// Indicator-weighted task loss of raw predictions `[B]`: binary
/// cross-entropy on logits for classification, squared error for
/// regression. `None` when no sample carries the task.
pub fn task_loss(g: &mut Graph, preds: Var, labels: &[f64], indicators: &[f64], objective: Objective) -> Result<Option<Var>> {
    let n: f64 = indicators.iter().sum();
    if n == 0.0 {
        return Ok(None);
    }
    if labels.len() != indicators.len() {
        return Err(Error::Contract("labels and indicators differ in length".into()));
    }
    let per = match objective {
        Objective::BinaryClassification => g.bce_with_logits(preds, labels)?,
        Objective::Regression => {
            let y = g.constant(Tensor::new(g.shape(preds).to_vec(), labels.to_vec())?);
            let d = g.sub(preds, y)?;
            g.square(d)
        }
    };
    let w: Vec<f64> = indicators.iter().map(|d| d / n).collect();
    Ok(Some(g.weighted_sum(per, &w)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub mask_rate: f64,
    /// Stop after this many optimiser steps.
    pub max_steps: Option<usize>,
    /// Fixed weights of the MCP tasks (uniform when absent).
    pub task_weights: Option<Vec<f64>>,
    /// Evaluate on the validation split every this many steps.
    pub eval_every: Option<usize>,
    /// Stop once every channel's validation masked accuracy reaches this.
    pub target_accuracy: Option<f64>,
    pub adam: AdamConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 1,
            batch_size: 32,
            mask_rate: DEFAULT_MASK_RATE,
            max_steps: None,
            task_weights: None,
            eval_every: None,
            target_accuracy: None,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PretrainReport {
    pub steps: usize,
    /// Training RNG position after the last step.
    pub rng: Option<RngState>,
    /// Set when `target_accuracy` was reached.
    pub reached_target: bool,
    pub step_losses: Vec<f64>,
    pub records: Vec<MetricsRecord>,
}

struct McpForward {
    total: Option<Var>,
    losses: Vec<Option<f64>>,
    correct: Vec<usize>,
    counts: Vec<usize>,
    trace: RoutingTrace,
}

fn mcp_forward(
    model: &SuperMoe,
    g: &mut Graph,
    instances: &[&Instance],
    lambda: &[f64],
    rate: f64,
    rng_for: &dyn Fn(u64) -> ChaCha8Rng,
) -> Result<McpForward> {
    let channels = model.mcp.channels();
    let mut masked = Vec::with_capacity(instances.len());
    let mut plans = Vec::with_capacity(instances.len());
    for inst in instances {
        let (m, p) = apply_mask(inst, &channels, rate, &mut rng_for(inst.user_id))?;
        masked.push(m);
        plans.push(p);
    }
    let refs: Vec<&Instance> = masked.iter().collect();
    let batch = Batch::from_instances(&model.schema, &refs)?;
    let enc = model.encoder.forward(g, &model.store, &batch)?;
    let mut task_vars = Vec::new();
    let mut weights = Vec::new();
    let mut out = McpForward {
        total: None,
        losses: vec![None; channels.len()],
        correct: vec![0; channels.len()],
        counts: vec![0; channels.len()],
        trace: enc.trace,
    };
    for (ci, ch) in channels.iter().enumerate() {
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (b, plan) in plans.iter().enumerate() {
            for &(p, tok) in &plan.masked[ch] {
                targets.push((rows.len(), tok));
                rows.push(b * batch.max_len + p);
            }
        }
        if rows.is_empty() {
            continue;
        }
        let logits = model.mcp.logits(g, &model.store, enc.hidden, ci, &rows)?;
        let lv = g.value(logits);
        for &(r, t) in &targets {
            let row = lv.row(r);
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            if best == t as usize {
                out.correct[ci] += 1;
            }
        }
        out.counts[ci] = targets.len();
        let loss = mcp_loss(g, logits, &targets)?;
        out.losses[ci] = Some(g.value(loss).data()[0]);
        task_vars.push(loss);
        weights.push(lambda[ci]);
    }
    if !task_vars.is_empty() {
        let mut t = total_loss(g, &task_vars, &weights)?;
        if let Some(aux) = enc.aux_loss {
            t = g.add(t, aux)?;
        }
        out.total = Some(t);
    }
    Ok(out)
}

const EVAL_EPOCH: u64 = u64::MAX;

/// Per-channel masked loss and accuracy on `ds` under a fixed mask draw.
pub fn evaluate_mcp(model: &SuperMoe, ds: &Dataset, rate: f64, seed: u64, batch_size: usize) -> Result<(MetricsRecord, RoutingTrace)> {
    let channels = model.mcp.channels();
    let lambda = vec![1.0; channels.len()];
    let mut loss_sum = vec![0.0; channels.len()];
    let mut correct = vec![0usize; channels.len()];
    let mut counts = vec![0usize; channels.len()];
    let mut trace = RoutingTrace::default();
    for chunk in ds.instances.chunks(batch_size.max(1)) {
        let refs: Vec<&Instance> = chunk.iter().collect();
        let mut g = Graph::new();
        let f = mcp_forward(model, &mut g, &refs, &lambda, rate, &|u| mask_rng(seed, EVAL_EPOCH, u))?;
        for ci in 0..channels.len() {
            if let Some(l) = f.losses[ci] {
                loss_sum[ci] += l * f.counts[ci] as f64;
            }
            correct[ci] += f.correct[ci];
            counts[ci] += f.counts[ci];
        }
        trace.merge(&f.trace);
    }
    let mut rec = MetricsRecord::new(0, "validation");
    for (ci, ch) in channels.iter().enumerate() {
        if counts[ci] > 0 {
            rec.task_loss.insert(ch.clone(), loss_sum[ci] / counts[ci] as f64);
            rec.masked_accuracy.insert(ch.clone(), correct[ci] as f64 / counts[ci] as f64);
        }
    }
    rec.set_utilization(&trace);
    Ok((rec, trace))
}

/// Shuffled mini-batches of instance indices.
pub(crate) fn epoch_batches(n: usize, batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

/// Runs MCP pre-training. `sink` receives one record at initialisation and
/// then train (and validation, when given) records after every epoch.
pub fn pretrain(
    model: &mut SuperMoe,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &PretrainConfig,
    seed: u64,
    sink: &mut dyn FnMut(&MetricsRecord) -> Result<()>,
) -> Result<PretrainReport> {
    if model.mcp.is_empty() {
        return Err(Error::Config("pre-training needs at least one MCP channel".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let channels = model.mcp.channels();
    let lambda = match &cfg.task_weights {
        Some(w) if w.len() != channels.len() => {
            return Err(Error::Config(format!(
                "{} task weights for {} MCP channels",
                w.len(),
                channels.len()
            )))
        }
        Some(w) => LambdaWeights::new(w.clone())?,
        None => LambdaWeights::uniform(channels.len()),
    };
    let start = Instant::now();
    let mut report = PretrainReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.max_steps.map_or(cfg.epochs * per_epoch, |m| m.min(cfg.epochs * per_epoch));

    let mut init = match val {
        Some(v) => evaluate_mcp(model, v, cfg.mask_rate, seed, cfg.batch_size)?.0,
        None => MetricsRecord::new(0, "init"),
    };
    init.step = 0;
    init.lambda = lambda.values().to_vec();
    init.wall_clock = start.elapsed().as_secs_f64();
    sink(&init)?;
    report.records.push(init);

    let mut adam = Adam::new(cfg.adam.clone(), &model.store);
    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        let mut loss_sum = vec![0.0; channels.len()];
        let mut correct = vec![0usize; channels.len()];
        let mut counts = vec![0usize; channels.len()];
        let mut trace = RoutingTrace::default();
        for idx in epoch_batches(train.len(), cfg.batch_size, &mut rng) {
            if step >= total_steps {
                break 'epochs;
            }
            let refs: Vec<&Instance> = idx.iter().map(|&i| &train.instances[i]).collect();
            let mut g = Graph::new();
            let f = mcp_forward(model, &mut g, &refs, lambda.values(), cfg.mask_rate, &|u| {
                mask_rng(seed, epoch as u64, u)
            })?;
            let Some(total) = f.total else { continue };
            let value = g.value(total).data()[0];
            if !value.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("MCP loss is {value}"),
                });
            }
            model.store.zero_grad();
            g.backward_into(total, &mut model.store)?;
            adam.step(&mut model.store, warmup_lr(cfg.adam.lr, step, total_steps, cfg.adam.warmup_frac));
            step += 1;
            report.step_losses.push(value);
            for ci in 0..channels.len() {
                if let Some(l) = f.losses[ci] {
                    loss_sum[ci] += l * f.counts[ci] as f64;
                }
                correct[ci] += f.correct[ci];
                counts[ci] += f.counts[ci];
            }
            trace.merge(&f.trace);
            if let (Some(v), Some(every)) = (val, cfg.eval_every) {
                if every > 0 && step % every == 0 && step < total_steps {
                    let rec = emit_validation(model, v, cfg, seed, step, &lambda, start, sink)?;
                    let hit = target_hit(&rec, cfg.target_accuracy, channels.len());
                    report.records.push(rec);
                    if hit {
                        report.reached_target = true;
                        break 'epochs;
                    }
                }
            }
        }
        let mut rec = MetricsRecord::new(step, "train");
        for (ci, ch) in channels.iter().enumerate() {
            if counts[ci] > 0 {
                rec.task_loss.insert(ch.clone(), loss_sum[ci] / counts[ci] as f64);
                rec.masked_accuracy.insert(ch.clone(), correct[ci] as f64 / counts[ci] as f64);
            }
        }
        rec.set_utilization(&trace);
        rec.lambda = lambda.values().to_vec();
        rec.wall_clock = start.elapsed().as_secs_f64();
        sink(&rec)?;
        report.records.push(rec);
        if let Some(v) = val {
            let rec = emit_validation(model, v, cfg, seed, step, &lambda, start, sink)?;
            let hit = target_hit(&rec, cfg.target_accuracy, channels.len());
            report.records.push(rec);
            if hit {
                report.reached_target = true;
                break;
            }
        }
    }
    report.steps = step;
    report.rng = Some(RngState::capture(&rng));
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn emit_validation(
    model: &SuperMoe,
    val: &Dataset,
    cfg: &PretrainConfig,
    seed: u64,
    step: usize,
    lambda: &LambdaWeights,
    start: Instant,
    sink: &mut dyn FnMut(&MetricsRecord) -> Result<()>,
) -> Result<MetricsRecord> {
    let mut rec = evaluate_mcp(model, val, cfg.mask_rate, seed, cfg.batch_size)?.0;
    rec.step = step;
    rec.lambda = lambda.values().to_vec();
    rec.wall_clock = start.elapsed().as_secs_f64();
    sink(&rec)?;
    Ok(rec)
}

fn target_hit(rec: &MetricsRecord, target: Option<f64>, channels: usize) -> bool {
    target.is_some_and(|t| rec.masked_accuracy.len() == channels && rec.masked_accuracy.values().all(|&a| a >= t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};

    fn seq_instance(toks: Vec<u32>) -> Instance {
        let other = vec![2; toks.len()];
        Instance {
            user_id: 5,
            channels: BTreeMap::from([
                ("m".to_string(), ChannelSeq::Tokens(toks)),
                ("o".to_string(), ChannelSeq::Tokens(other)),
            ]),
            labels: BTreeMap::from([("t".to_string(), 1.0)]),
            indicators: BTreeMap::from([("t".to_string(), 1)]),
        }
    }

    #[test]
    fn mask_rate_extremes() {
        let inst = seq_instance((2..12).collect());
        let ch = vec!["m".to_string()];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (same, plan) = apply_mask(&inst, &ch, 0.0, &mut rng).unwrap();
        assert_eq!(same, inst);
        assert_eq!(plan.count(), 0);
        let (all, plan) = apply_mask(&inst, &ch, 1.0, &mut rng).unwrap();
        assert!(all.tokens("m").unwrap().iter().all(|&t| t == MASK_TOKEN));
        assert_eq!(plan.masked["m"].len(), 10);
        assert_eq!(plan.masked["m"][3], (3, 5));
        assert_eq!(all.tokens("o"), inst.tokens("o"));
        assert_eq!((all.labels.clone(), all.indicators.clone()), (inst.labels.clone(), inst.indicators.clone()));
        assert!(apply_mask(&inst, &ch, 1.5, &mut rng).is_err());
    }

    #[test]
    fn tiny_rate_still_masks_one_position() {
        let inst = seq_instance(vec![3, 4]);
        let (_, plan) = apply_mask(&inst, &["m".to_string()], 1e-12, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(plan.masked["m"].len(), 1);
    }

    #[test]
    fn log_prob_examples() {
        let mut g = Graph::new();
        let certain = g.constant(Tensor::matrix(&[&[0.0, 1000.0]]));
        let lp = mcp_log_prob(&mut g, certain, &[(0, 1)]).unwrap();
        assert_eq!(g.value(lp).data()[0], 0.0);
        let half = g.constant(Tensor::matrix(&[&[0.0, 0.0], &[1.0, 1.0]]));
        let lp = mcp_log_prob(&mut g, half, &[(0, 0), (1, 1)]).unwrap();
        assert!((g.value(lp).data()[0] - 2.0 * 0.5f64.ln()).abs() < 1e-15);
        assert!(matches!(mcp_log_prob(&mut g, half, &[(2, 0)]), Err(Error::Contract(_))));
        let uniform = g.constant(Tensor::zeros(&[3, 4]));
        let l = mcp_loss(&mut g, uniform, &[(0, 1), (1, 2), (2, 3)]).unwrap();
        assert!((g.value(l).data()[0] - 4f64.ln()).abs() < 1e-15);
        assert!(mcp_loss(&mut g, uniform, &[]).is_err());
    }

    #[test]
    fn hand_computed_mean_nll() {
        let logits = [[1.0, 2.0, 0.5], [0.0, -1.0, 3.0]];
        let mut g = Graph::new();
        let z = g.constant(Tensor::matrix(&[&logits[0], &logits[1]]));
        let l = mcp_loss(&mut g, z, &[(0, 2), (1, 0)]).unwrap();
        let lse = |r: &[f64; 3]| r.iter().map(|v| v.exp()).sum::<f64>().ln();
        let want = ((lse(&logits[0]) - 0.5) + (lse(&logits[1]) - 0.0)) / 2.0;
        assert!((g.value(l).data()[0] - want).abs() < 1e-10);
    }

    #[test]
    fn task_loss_respects_indicators() {
        assert_eq!(indicator_mean(&[0.4, 99.0], &[1.0, 0.0]), Some(0.4));
        assert_eq!(indicator_mean(&[0.4, 99.0], &[0.0, 0.0]), None);
        let mut g = Graph::new();
        let p = g.constant(Tensor::vector(vec![0.5, 2.0, -1.0]));
        let l = task_loss(&mut g, p, &[1.0, 0.0, -2.0], &[1.0, 0.0, 1.0], Objective::Regression)
            .unwrap()
            .unwrap();
        assert!((g.value(l).data()[0] - (0.25 + 1.0) / 2.0).abs() < 1e-15);
        assert!(task_loss(&mut g, p, &[0.0; 3], &[0.0; 3], Objective::BinaryClassification)
            .unwrap()
            .is_none());
    }

    #[test]
    fn zero_epochs_keep_initialisation_and_runs_repeat() {
        let ds = generate_synthetic(&SyntheticConfig::copy_task(16, 6, 10), 3).unwrap();
        let mcfg = crate::moe::ModelConfig {
            d_model: 8,
            d_ff: 8,
            blocks: 1,
            experts: 2,
            ..Default::default()
        };
        let mut model = SuperMoe::new(&ds.schema, &mcfg, 1).unwrap();
        let before = model.store.clone();
        let cfg = PretrainConfig {
            epochs: 0,
            ..PretrainConfig::default()
        };
        let r = pretrain(&mut model, &ds, None, &cfg, 4, &mut |_| Ok(())).unwrap();
        assert_eq!(r.records.len(), 1);
        for (a, b) in model.store.iter().zip(before.iter()) {
            assert_eq!(a.1.value, b.1.value);
        }
        let cfg = PretrainConfig {
            epochs: 2,
            batch_size: 4,
            ..PretrainConfig::default()
        };
        let mut m2 = SuperMoe::new(&ds.schema, &mcfg, 1).unwrap();
        let a = pretrain(&mut model, &ds, Some(&ds), &cfg, 4, &mut |_| Ok(())).unwrap();
        let b = pretrain(&mut m2, &ds, Some(&ds), &cfg, 4, &mut |_| Ok(())).unwrap();
        assert_eq!(a.step_losses, b.step_losses);
        assert_eq!(a.steps, 8);
    }
}
