//! Fine-tuning and universal user embeddings.
//!
//! The encoder output is max-pooled over each instance's real positions into
//! the user representation `H`; every task has a linear tower `H·w + b`
//! producing a raw score.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Graph, Var};
use crate::checkpoint::{Checkpoint, RngState};
use crate::data::{Dataset, Instance, Objective, Schema};
use crate::error::{Error, Result};
use crate::metrics::{recall_at_precision, rmse, MetricsRecord};
use crate::mfp::{Batch, PROJ_INIT_STD};
use crate::model::SuperMoe;
use crate::moe::{Encoder, RoutingTrace};
use crate::multitask::{exact_auc, outer_step, surrogate_auc_graph, total_loss, BilevelConfig, BilevelObjective, LambdaWeights};
use crate::optim::{warmup_lr, Adam, AdamConfig};
use crate::params::{normal_init, GradSet, ParamId, ParamStore};
use crate::pretrain::{epoch_batches, task_loss};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Max,
    /// Mean over real positions (for ablations).
    Mean,
}

/// Linear towers, one per task, in schema order.
#[derive(Debug, Clone)]
pub struct Towers {
    towers: Vec<(String, Objective, ParamId, ParamId)>,
}

impl Towers {
    pub fn new(schema: &Schema, d_model: usize, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Towers> {
        let mut towers = Vec::with_capacity(schema.tasks.len());
        for t in &schema.tasks {
            let w = store.add(format!("tower.{}.w", t.name), normal_init(rng, &[d_model, 1], PROJ_INIT_STD))?;
            let b = store.add(format!("tower.{}.b", t.name), Tensor::zeros(&[1]))?;
            towers.push((t.name.clone(), t.objective, w, b));
        }
        Ok(Towers { towers })
    }

    pub fn len(&self) -> usize {
        self.towers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.towers.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.towers.iter().map(|t| t.0.clone()).collect()
    }

    pub fn objective(&self, k: usize) -> Objective {
        self.towers[k].1
    }

    /// `(weight, bias)` parameter ids of tower `k`.
    pub fn params(&self, k: usize) -> (ParamId, ParamId) {
        (self.towers[k].2, self.towers[k].3)
    }

    /// Raw scores `[B]` of tower `k` for pooled representations `h[B, D]`.
    pub fn apply(&self, g: &mut Graph, store: &ParamStore, h: Var, k: usize) -> Result<Var> {
        let (_, _, w, b) = &self.towers[k];
        let wv = g.param(store, *w);
        let bv = g.param(store, *b);
        let z = g.matmul(h, wv)?;
        let z = g.add_row(z, bv)?;
        let n = g.shape(z)[0];
        g.reshape(z, &[n])
    }
}

pub fn pool(g: &mut Graph, hidden: Var, batch: &Batch, pooling: Pooling) -> Result<Var> {
    match pooling {
        Pooling::Max => g.segment_max(hidden, &batch.segments()),
        Pooling::Mean => g.segment_mean(hidden, &batch.segments()),
    }
}

#[derive(Debug)]
pub struct TaskForward {
    /// Pooled user representations `[B, D]`.
    pub pooled: Var,
    /// Raw scores `[B]` per task.
    pub scores: Vec<Var>,
    pub trace: RoutingTrace,
    pub aux_loss: Option<Var>,
}

/// Encodes `batch`, pools, and applies every tower.
pub fn forward_tasks(model: &SuperMoe, store: &ParamStore, g: &mut Graph, batch: &Batch, pooling: Pooling) -> Result<TaskForward> {
    let enc = model.encoder.forward(g, store, batch)?;
    let pooled = pool(g, enc.hidden, batch, pooling)?;
    let scores = (0..model.towers.len())
        .map(|k| model.towers.apply(g, store, pooled, k))
        .collect::<Result<_>>()?;
    Ok(TaskForward {
        pooled,
        scores,
        trace: enc.trace,
        aux_loss: enc.aux_loss,
    })
}

/// Labels and indicators of each task for a list of instances.
#[derive(Debug, Clone)]
pub struct TaskTargets {
    pub labels: Vec<Vec<f64>>,
    pub indicators: Vec<Vec<f64>>,
}

impl TaskTargets {
    pub fn new(tasks: &[String], instances: &[&Instance]) -> TaskTargets {
        let labels = tasks
            .iter()
            .map(|t| instances.iter().map(|i| i.label(t).unwrap_or(0.0)).collect())
            .collect();
        let indicators = tasks
            .iter()
            .map(|t| instances.iter().map(|i| f64::from(u8::from(i.indicator(t)))).collect())
            .collect();
        TaskTargets { labels, indicators }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    /// Encoder weights keep training with the towers.
    #[default]
    Trainable,
    /// Only towers are updated.
    Frozen,
}

/// Builds a model from `seed`, then restores encoder weights (MFP and
/// blocks) from `ckpt`. Towers and MCP heads keep their fresh values.
pub fn init_from_pretrained(ckpt: &Checkpoint, schema: &Schema, mode: EncoderMode, seed: u64) -> Result<SuperMoe> {
    let mut model = SuperMoe::new(schema, &ckpt.config.model, seed)?;
    ckpt.restore_into(&mut model.store, Encoder::is_encoder_param)?;
    model.set_encoder_trainable(mode == EncoderMode::Trainable);
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub max_steps: Option<usize>,
    pub freeze_encoder: bool,
    pub pooling: Pooling,
    /// Starting task weights (uniform when absent).
    pub initial_lambda: Option<Vec<f64>>,
    /// Validation instances sampled for each weight update.
    pub outer_batch_size: usize,
    pub adam: AdamConfig,
    pub bilevel: BilevelConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 1,
            batch_size: 32,
            max_steps: None,
            freeze_encoder: false,
            pooling: Pooling::Max,
            initial_lambda: None,
            outer_batch_size: 256,
            adam: AdamConfig::default(),
            bilevel: BilevelConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FinetuneReport {
    pub steps: usize,
    /// Training RNG position after the last step.
    pub rng: Option<RngState>,
    pub step_losses: Vec<f64>,
    pub lambda_history: Vec<Vec<f64>>,
    pub records: Vec<MetricsRecord>,
    pub final_lambda: Vec<f64>,
}

/// Per-task losses `L_k` of one forward pass (`None`: no indicated sample).
fn task_losses(model: &SuperMoe, g: &mut Graph, fwd: &TaskForward, targets: &TaskTargets) -> Result<Vec<Option<Var>>> {
    (0..model.towers.len())
        .map(|k| {
            task_loss(
                g,
                fwd.scores[k],
                &targets.labels[k],
                &targets.indicators[k],
                model.towers.objective(k),
            )
        })
        .collect()
}

/// Bi-level view of a model on one training batch and one validation batch.
pub struct FinetuneObjective<'a> {
    pub model: &'a SuperMoe,
    pub pooling: Pooling,
    pub train: &'a Batch,
    pub train_targets: &'a TaskTargets,
    pub val: &'a Batch,
    pub val_targets: &'a TaskTargets,
    pub p_max: usize,
    /// Drop tower gradients from the unrolled step.
    pub shared_only: bool,
}

impl BilevelObjective for FinetuneObjective<'_> {
    fn num_tasks(&self) -> usize {
        self.model.towers.len()
    }

    fn task_gradients(&mut self, store: &ParamStore) -> Result<Vec<Option<GradSet>>> {
        let mut g = Graph::new();
        let fwd = forward_tasks(self.model, store, &mut g, self.train, self.pooling)?;
        let losses = task_losses(self.model, &mut g, &fwd, self.train_targets)?;
        let mut grads: Vec<Option<GradSet>> = losses
            .into_iter()
            .map(|l| l.map(|l| g.param_grads(l, store.len())).transpose())
            .collect::<Result<_>>()?;
        if self.shared_only {
            for set in grads.iter_mut().flatten() {
                for (id, p) in store.iter() {
                    if !Encoder::is_encoder_param(&p.name) {
                        set.0[id.index()] = None;
                    }
                }
            }
        }
        Ok(grads)
    }

    /// Mean hinge surrogate over binary tasks whose indicated validation
    /// samples contain both classes.
    fn validation_objective(&mut self, store: &ParamStore, seed: u64, with_grad: bool) -> Result<Option<(f64, Option<GradSet>)>> {
        let mut g = Graph::new();
        let fwd = forward_tasks(self.model, store, &mut g, self.val, self.pooling)?;
        let mut terms = Vec::new();
        for k in 0..self.model.towers.len() {
            if self.model.towers.objective(k) != Objective::BinaryClassification {
                continue;
            }
            let rows: Vec<usize> = (0..self.val.size).filter(|&i| self.val_targets.indicators[k][i] == 1.0).collect();
            if rows.is_empty() {
                continue;
            }
            let labels: Vec<f64> = rows.iter().map(|&i| self.val_targets.labels[k][i]).collect();
            let s = g.pick(fwd.scores[k], &rows)?;
            match surrogate_auc_graph(&mut g, s, &labels, self.p_max, seed.wrapping_add(k as u64))? {
                Some(v) => terms.push(v),
                None => log::warn!("task `{}` has a single validation class; left out of the outer objective", self.model.towers.names()[k]),
            }
        }
        if terms.is_empty() {
            return Ok(None);
        }
        let s = g.stack(&terms)?;
        let obj = g.mean(s);
        let value = g.value(obj).data()[0];
        let grads = if with_grad { Some(g.param_grads(obj, store.len())?) } else { None };
        Ok(Some((value, grads)))
    }
}

/// Raw scores of every task on `ds`, in instance order.
pub fn predict(model: &SuperMoe, ds: &Dataset, pooling: Pooling, batch_size: usize) -> Result<(Vec<Vec<f64>>, RoutingTrace)> {
    let mut scores = vec![Vec::with_capacity(ds.len()); model.towers.len()];
    let mut trace = RoutingTrace::default();
    for chunk in ds.instances.chunks(batch_size.max(1)) {
        let refs: Vec<&Instance> = chunk.iter().collect();
        let batch = Batch::from_instances(&model.schema, &refs)?;
        let mut g = Graph::new();
        let fwd = forward_tasks(model, &model.store, &mut g, &batch, pooling)?;
        for (k, s) in fwd.scores.iter().enumerate() {
            scores[k].extend_from_slice(g.value(*s).data());
        }
        trace.merge(&fwd.trace);
    }
    Ok((scores, trace))
}

/// Per-task loss, AUC or RMSE and recall at 85%/50% precision on `ds`.
pub fn evaluate_tasks(model: &SuperMoe, ds: &Dataset, pooling: Pooling, batch_size: usize, split: &str) -> Result<MetricsRecord> {
    let (scores, trace) = predict(model, ds, pooling, batch_size)?;
    let names = model.towers.names();
    let refs: Vec<&Instance> = ds.instances.iter().collect();
    let targets = TaskTargets::new(&names, &refs);
    let mut rec = MetricsRecord::new(0, split);
    rec.set_utilization(&trace);
    for (k, name) in names.iter().enumerate() {
        let idx: Vec<usize> = (0..ds.len()).filter(|&i| targets.indicators[k][i] == 1.0).collect();
        if idx.is_empty() {
            rec.skipped_tasks.push(name.clone());
            continue;
        }
        let s: Vec<f64> = idx.iter().map(|&i| scores[k][i]).collect();
        let y: Vec<f64> = idx.iter().map(|&i| targets.labels[k][i]).collect();
        match model.towers.objective(k) {
            Objective::BinaryClassification => {
                let loss = s
                    .iter()
                    .zip(&y)
                    .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
                    .sum::<f64>()
                    / s.len() as f64;
                rec.task_loss.insert(name.clone(), loss);
                match exact_auc(&s, &y) {
                    Ok(a) => {
                        rec.task_auc.insert(name.clone(), a);
                        let p: Vec<f64> = s.iter().map(|&z| sigmoid(z)).collect();
                        rec.recall_at_precision_85.insert(name.clone(), recall_at_precision(&p, &y, 85.0)?.0);
                        rec.recall_at_precision_50.insert(name.clone(), recall_at_precision(&p, &y, 50.0)?.0);
                    }
                    Err(Error::UndefinedMetric(_)) => rec.skipped_tasks.push(name.clone()),
                    Err(e) => return Err(e),
                }
            }
            Objective::Regression => {
                let r = rmse(&s, &y)?;
                rec.task_loss.insert(name.clone(), r * r);
                rec.task_rmse.insert(name.clone(), r);
            }
        }
    }
    Ok(rec)
}

/// Trains towers (and the encoder unless frozen) on the weighted task loss.
/// With bi-level weighting enabled, every `inner_steps` optimiser steps the
/// weights take one outer step on a sampled validation batch.
pub fn finetune(
    model: &mut SuperMoe,
    train: &Dataset,
    val: Option<&Dataset>,
    test: Option<&Dataset>,
    cfg: &FinetuneConfig,
    seed: u64,
    sink: &mut dyn FnMut(&MetricsRecord) -> Result<()>,
) -> Result<FinetuneReport> {
    let k = model.towers.len();
    if k == 0 {
        return Err(Error::Config("fine-tuning needs at least one task".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let names = model.towers.names();
    if !train.instances.iter().any(|i| names.iter().any(|t| i.indicator(t))) {
        return Err(Error::Config("no training instance carries any task".into()));
    }
    if cfg.bilevel.enabled && val.is_none_or(|v| v.is_empty()) {
        return Err(Error::Config("bi-level weighting needs a validation split".into()));
    }
    cfg.bilevel.validate()?;
    if cfg.freeze_encoder {
        model.set_encoder_trainable(false);
    }
    let mut lambda = match &cfg.initial_lambda {
        Some(l) if l.len() != k => return Err(Error::Config(format!("{} initial weights for {k} tasks", l.len()))),
        Some(l) => LambdaWeights::new(l.clone())?,
        None => LambdaWeights::uniform(k),
    };
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut outer_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_0b7e);
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.max_steps.map_or(cfg.epochs * per_epoch, |m| m.min(cfg.epochs * per_epoch));
    let mut report = FinetuneReport::default();

    let mut emit = |mut rec: MetricsRecord, step: usize, lambda: &LambdaWeights, report: &mut FinetuneReport| -> Result<()> {
        rec.step = step;
        rec.lambda = lambda.values().to_vec();
        rec.wall_clock = start.elapsed().as_secs_f64();
        sink(&rec)?;
        report.records.push(rec);
        Ok(())
    };
    let eval_bs = cfg.outer_batch_size.max(cfg.batch_size);
    let evaluate = |model: &SuperMoe, step: usize, lambda: &LambdaWeights, report: &mut FinetuneReport, emit: &mut dyn FnMut(MetricsRecord, usize, &LambdaWeights, &mut FinetuneReport) -> Result<()>| -> Result<()> {
        for (ds, split) in [(val, "validation"), (test, "test")] {
            if let Some(ds) = ds.filter(|d| !d.is_empty()) {
                let rec = evaluate_tasks(model, ds, cfg.pooling, eval_bs, split)?;
                emit(rec, step, lambda, report)?;
            }
        }
        Ok(())
    };
    evaluate(model, 0, &lambda, &mut report, &mut emit)?;
    report.lambda_history.push(lambda.values().to_vec());

    let mut adam = Adam::new(cfg.adam.clone(), &model.store);
    let mut step = 0;
    'epochs: for _epoch in 0..cfg.epochs {
        let mut loss_sum = vec![0.0; k];
        let mut loss_n = vec![0usize; k];
        let mut trace = RoutingTrace::default();
        for idx in epoch_batches(train.len(), cfg.batch_size, &mut rng) {
            if step >= total_steps {
                break 'epochs;
            }
            let refs: Vec<&Instance> = idx.iter().map(|&i| &train.instances[i]).collect();
            let batch = Batch::from_instances(&model.schema, &refs)?;
            let targets = TaskTargets::new(&names, &refs);
            let mut g = Graph::new();
            let fwd = forward_tasks(model, &model.store, &mut g, &batch, cfg.pooling)?;
            let losses = task_losses(model, &mut g, &fwd, &targets)?;
            let mut vars = Vec::new();
            let mut weights = Vec::new();
            for (j, l) in losses.iter().enumerate() {
                if let Some(l) = l {
                    loss_sum[j] += g.value(*l).data()[0];
                    loss_n[j] += 1;
                    vars.push(*l);
                    weights.push(lambda.values()[j]);
                }
            }
            if vars.is_empty() {
                continue;
            }
            let mut total = total_loss(&mut g, &vars, &weights)?;
            if let Some(aux) = fwd.aux_loss {
                total = g.add(total, aux)?;
            }
            let value = g.value(total).data()[0];
            if !value.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("task loss is {value}"),
                });
            }
            trace.merge(&fwd.trace);
            model.store.zero_grad();
            g.backward_into(total, &mut model.store)?;
            adam.step(&mut model.store, warmup_lr(cfg.adam.lr, step, total_steps, cfg.adam.warmup_frac));
            step += 1;
            report.step_losses.push(value);

            if cfg.bilevel.enabled && step % cfg.bilevel.inner_steps == 0 {
                let v = val.expect("checked above");
                let m = cfg.outer_batch_size.min(v.len());
                let pick = sample(&mut outer_rng, v.len(), m).into_vec();
                let vrefs: Vec<&Instance> = pick.iter().map(|&i| &v.instances[i]).collect();
                let vbatch = Batch::from_instances(&model.schema, &vrefs)?;
                let vtargets = TaskTargets::new(&names, &vrefs);
                let mut obj = FinetuneObjective {
                    model,
                    pooling: cfg.pooling,
                    train: &batch,
                    train_targets: &targets,
                    val: &vbatch,
                    val_targets: &vtargets,
                    p_max: cfg.bilevel.p_max,
                    shared_only: cfg.bilevel.shared_only,
                };
                let out = outer_step(&lambda, &model.store, &mut obj, &cfg.bilevel, outer_rng.random())?;
                lambda = out.lambda;
                report.lambda_history.push(lambda.values().to_vec());
            }
        }
        let mut rec = MetricsRecord::new(step, "train");
        for (j, n) in names.iter().enumerate() {
            if loss_n[j] > 0 {
                rec.task_loss.insert(n.clone(), loss_sum[j] / loss_n[j] as f64);
            } else {
                rec.skipped_tasks.push(n.clone());
            }
        }
        rec.set_utilization(&trace);
        emit(rec, step, &lambda, &mut report)?;
        evaluate(model, step, &lambda, &mut report, &mut emit)?;
    }
    report.steps = step;
    report.rng = Some(RngState::capture(&rng));
    report.final_lambda = lambda.values().to_vec();
    Ok(report)
}

/// Header line of an embedding file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingHeader {
    pub format: String,
    pub dim: usize,
    pub count: usize,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserEmbedding {
    pub user_id: u64,
    pub embedding: Vec<f64>,
}

/// Pooled representation of every instance, sorted by user id.
pub fn compute_embeddings(model: &SuperMoe, ds: &Dataset, pooling: Pooling, batch_size: usize, threads: usize) -> Result<Vec<UserEmbedding>> {
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.sort_by_key(|&i| ds.instances[i].user_id);
    let chunks: Vec<&[usize]> = order.chunks(batch_size.max(1)).collect();
    let run = |chunk: &[usize]| -> Result<Vec<UserEmbedding>> {
        let refs: Vec<&Instance> = chunk.iter().map(|&i| &ds.instances[i]).collect();
        let batch = Batch::from_instances(&model.schema, &refs)?;
        let mut g = Graph::new();
        let enc = model.encoder.forward(&mut g, &model.store, &batch)?;
        let h = pool(&mut g, enc.hidden, &batch, pooling)?;
        let h = g.value(h);
        Ok(refs
            .iter()
            .enumerate()
            .map(|(b, inst)| UserEmbedding {
                user_id: inst.user_id,
                embedding: h.row(b).to_vec(),
            })
            .collect())
    };
    let threads = threads.max(1).min(chunks.len().max(1));
    let mut parts: Vec<Result<Vec<UserEmbedding>>> = Vec::with_capacity(chunks.len());
    if threads == 1 {
        parts.extend(chunks.iter().map(|c| run(c)));
    } else {
        let per = chunks.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = chunks
                .chunks(per)
                .map(|group| s.spawn(|| group.iter().map(|c| run(c)).collect::<Vec<_>>()))
                .collect();
            for h in handles {
                parts.extend(h.join().expect("embedding worker panicked"));
            }
        });
    }
    let mut out = Vec::with_capacity(ds.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Writes a header line and one `{"user_id", "embedding"}` line per user.
pub fn export_embeddings(model: &SuperMoe, ds: &Dataset, path: &Path, pooling: Pooling, source: &str, threads: usize) -> Result<usize> {
    let rows = compute_embeddings(model, ds, pooling, 64, threads)?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let header = EmbeddingHeader {
        format: "supermoe-embeddings".into(),
        dim: model.config.d_model,
        count: rows.len(),
        source: source.to_string(),
    };
    let mut put = |line: String| writeln!(w, "{line}").map_err(|e| Error::io(path, e));
    put(serde_json::to_string(&header).expect("header serialises"))?;
    for r in &rows {
        put(serde_json::to_string(r).expect("row serialises"))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(rows.len())
}

/// Reads an embedding file back as `(header, rows)`.
pub fn read_embeddings(path: &Path) -> Result<(EmbeddingHeader, BTreeMap<u64, Vec<f64>>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let parse_err = |line: usize, e: serde_json::Error| Error::Parse {
        line,
        message: e.to_string(),
    };
    let header: EmbeddingHeader = serde_json::from_str(lines.next().unwrap_or("")).map_err(|e| parse_err(1, e))?;
    let mut rows = BTreeMap::new();
    for (i, l) in lines.enumerate() {
        let r: UserEmbedding = serde_json::from_str(l).map_err(|e| parse_err(i + 2, e))?;
        rows.insert(r.user_id, r.embedding);
    }
    Ok((header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, ChannelSeq, SyntheticConfig, TaskMode};
    use crate::moe::ModelConfig;

    fn small_model(ds: &Dataset) -> SuperMoe {
        let cfg = ModelConfig {
            d_model: 8,
            d_ff: 8,
            heads: 2,
            blocks: 1,
            experts: 2,
            ..ModelConfig::default()
        };
        SuperMoe::new(&ds.schema, &cfg, 3).unwrap()
    }

    fn data(n: usize) -> Dataset {
        let cfg = SyntheticConfig {
            num_instances: n,
            mean_length: 6,
            length_jitter: 0.5,
            category_vocab: 10,
            id_vocab: 30,
            task_mode: TaskMode::Independent(2),
            ..SyntheticConfig::default()
        };
        generate_synthetic(&cfg, 2).unwrap()
    }

    #[test]
    fn zero_tower_weights_give_the_bias() {
        let ds = data(3);
        let mut model = small_model(&ds);
        let (w, b) = model.towers.params(0);
        model.store.value_mut(w).fill(0.0);
        model.store.value_mut(b).fill(0.7);
        let refs: Vec<&Instance> = ds.instances.iter().collect();
        let batch = Batch::from_instances(&ds.schema, &refs).unwrap();
        let mut g = Graph::new();
        let f = forward_tasks(&model, &model.store, &mut g, &batch, Pooling::Max).unwrap();
        assert_eq!(g.value(f.scores[0]).data(), &[0.7, 0.7, 0.7]);
    }

    #[test]
    fn tower_is_linear_in_h() {
        let ds = data(1);
        let mut model = small_model(&ds);
        let (_, b) = model.towers.params(1);
        model.store.value_mut(b).fill(0.0);
        let h = Tensor::from_fn(&[2, 8], |i| (i as f64 * 0.37).sin());
        let mut g = Graph::new();
        let hv = g.constant(h.clone());
        let h3 = g.scale(hv, 3.0);
        let y = model.towers.apply(&mut g, &model.store, hv, 1).unwrap();
        let y3 = model.towers.apply(&mut g, &model.store, h3, 1).unwrap();
        for (a, b) in g.value(y).data().iter().zip(g.value(y3).data()) {
            assert!((3.0 * a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn one_position_pools_to_itself_and_max_is_elementwise() {
        let mut g = Graph::new();
        let h = g.constant(Tensor::matrix(&[&[1.0, -2.0, 0.5], &[0.0, 3.0, 0.5], &[9.0, 9.0, 9.0]]));
        let batch = Batch {
            size: 2,
            max_len: 2,
            lengths: vec![2, 1],
            user_ids: vec![0, 1],
            channels: BTreeMap::new(),
        };
        let h4 = g.concat(&[h, h], 0).unwrap();
        let h4 = g.slice(h4, 0, 0, 4).unwrap();
        let p = pool(&mut g, h4, &batch, Pooling::Max).unwrap();
        assert_eq!(g.value(p).row(0), &[1.0, 3.0, 0.5]);
        assert_eq!(g.value(p).row(1), &[9.0, 9.0, 9.0]);
    }

    #[test]
    fn export_is_sorted_deterministic_and_local() {
        let mut ds = data(5);
        ds.instances.reverse();
        let model = small_model(&ds);
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.jsonl");
        let b = dir.path().join("b.jsonl");
        export_embeddings(&model, &ds, &a, Pooling::Max, "init", 1).unwrap();
        export_embeddings(&model, &ds, &b, Pooling::Max, "init", 3).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        let (header, rows) = read_embeddings(&a).unwrap();
        assert_eq!((header.dim, header.count), (8, 5));
        assert_eq!(rows.keys().copied().collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);

        let mut changed = ds.clone();
        let target = changed.instances.iter_mut().find(|i| i.user_id == 2).unwrap();
        if let Some(ChannelSeq::Tokens(t)) = target.channels.get_mut("cat0") {
            t[0] = if t[0] == 2 { 3 } else { 2 };
        }
        let c = dir.path().join("c.jsonl");
        export_embeddings(&model, &changed, &c, Pooling::Max, "init", 1).unwrap();
        let (_, after) = read_embeddings(&c).unwrap();
        for (uid, v) in &rows {
            assert_eq!(v == &after[uid], *uid != 2, "user {uid}");
        }

        let mut empty = ds.clone();
        empty.instances.clear();
        let e = dir.path().join("e.jsonl");
        assert_eq!(export_embeddings(&model, &empty, &e, Pooling::Max, "init", 1).unwrap(), 0);
        assert_eq!(fs::read_to_string(&e).unwrap().lines().count(), 1);
    }

    #[test]
    fn frozen_encoder_does_not_move() {
        let ds = data(40);
        let mut model = small_model(&ds);
        let before = model.store.clone();
        let cfg = FinetuneConfig {
            epochs: 3,
            batch_size: 4,
            freeze_encoder: true,
            ..FinetuneConfig::default()
        };
        finetune(&mut model, &ds, None, None, &cfg, 1, &mut |_| Ok(())).unwrap();
        for ((_, a), (_, b)) in model.store.iter().zip(before.iter()) {
            if Encoder::is_encoder_param(&a.name) || a.name.starts_with("mcp.") {
                assert_eq!(a.value, b.value, "{}", a.name);
            } else {
                assert_ne!(a.value, b.value, "{}", a.name);
            }
        }
    }

    #[test]
    fn trainable_encoder_gets_gradients_on_first_step() {
        let ds = data(8);
        let model = small_model(&ds);
        let refs: Vec<&Instance> = ds.instances.iter().collect();
        let batch = Batch::from_instances(&ds.schema, &refs).unwrap();
        let targets = TaskTargets::new(&model.towers.names(), &refs);
        let mut g = Graph::new();
        let fwd = forward_tasks(&model, &model.store, &mut g, &batch, Pooling::Max).unwrap();
        let l = task_losses(&model, &mut g, &fwd, &targets).unwrap()[0].unwrap();
        let grads = g.param_grads(l, model.store.len()).unwrap();
        let id = model.store.find("mfp.proj.w").unwrap();
        assert!(grads.get(id).unwrap().max_abs() > 0.0);
    }
}
