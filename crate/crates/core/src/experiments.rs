//! Reproducible synthetic experiments: full-model gradient check, MCP
//! overfitting, the seesaw paired comparison and the MoE capacity study.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Var};
use crate::data::{generate_synthetic, split_dataset, Dataset, DenseStats, Instance, SyntheticConfig, TaskMode};
use crate::error::Result;
use crate::finetune::{evaluate_tasks, finetune, forward_tasks, FinetuneConfig, Pooling, TaskTargets};
use crate::gradcheck::{check_params, GradCheckOptions, GradCheckReport};
use crate::mfp::Batch;
use crate::model::SuperMoe;
use crate::moe::{GateConvention, ModelConfig, MoeFfnLayer};
use crate::multitask::BilevelConfig;
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::pretrain::{apply_mask, mcp_loss, mask_rng, pretrain, task_loss, PretrainConfig};
use crate::tensor::Tensor;

/// The default tiny model checked by `grad-check`.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        d_ff: 32,
        heads: 2,
        blocks: 2,
        experts: 3,
        ..ModelConfig::default()
    }
}

/// Schema for the tiny model: every channel kind, a sharded id table, one
/// MCP channel and one task.
pub fn tiny_data_config(instances: usize, length: usize) -> SyntheticConfig {
    SyntheticConfig {
        num_instances: instances,
        mean_length: length,
        length_jitter: 0.0,
        category_channels: 2,
        category_vocab: 10,
        id_channels: 1,
        id_vocab: 24,
        id_shards: 3,
        dense_channels: 2,
        embed_dim: 4,
        mcp_channels: 1,
        task_mode: TaskMode::Independent(1),
        indicator_rate: 1.0,
        label_noise_std: 0.1,
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckRun {
    pub report: GradCheckReport,
    pub parameters: usize,
    pub seconds: f64,
}

/// Central finite differences against reverse mode for every parameter
/// coordinate of the tiny model on a `batch × length` batch. The loss
/// combines the MCP objective, the task loss on the pooled embedding and a
/// quadratic read-out of the encoder output.
pub fn grad_check_tiny(model_cfg: &ModelConfig, batch: usize, length: usize, seed: u64, opts: &GradCheckOptions) -> Result<GradCheckRun> {
    let start = Instant::now();
    let ds = generate_synthetic(&tiny_data_config(batch, length), seed)?;
    let model = SuperMoe::new(&ds.schema, model_cfg, seed)?;
    let channels = model.mcp.channels();
    let mut masked = Vec::new();
    let mut targets = Vec::new();
    for (b, inst) in ds.instances.iter().enumerate() {
        let (m, plan) = apply_mask(inst, &channels, 0.3, &mut mask_rng(seed, 0, inst.user_id))?;
        for &(p, tok) in &plan.masked[&channels[0]] {
            targets.push((b * length + p, tok));
        }
        masked.push(m);
    }
    let refs: Vec<&Instance> = masked.iter().collect();
    let batch_data = Batch::from_instances(&ds.schema, &refs)?;
    let task_targets = TaskTargets::new(&model.towers.names(), &refs);
    let rows: Vec<usize> = targets.iter().map(|t| t.0).collect();
    let local: Vec<(usize, u32)> = targets.iter().enumerate().map(|(i, t)| (i, t.1)).collect();
    let readout: Vec<f64> = {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
        (0..batch * length * model_cfg.d_model).map(|_| rng.random_range(-1.0..1.0)).collect()
    };
    let loss = |g: &mut Graph, store: &ParamStore| -> Result<Var> {
        let fwd = forward_tasks(&model, store, g, &batch_data, Pooling::Max)?;
        let enc_hidden = model.encoder.forward(g, store, &batch_data)?.hidden;
        let logits = model.mcp.logits(g, store, enc_hidden, 0, &rows)?;
        let mcp = mcp_loss(g, logits, &local)?;
        let task = task_loss(
            g,
            fwd.scores[0],
            &task_targets.labels[0],
            &task_targets.indicators[0],
            model.towers.objective(0),
        )?
        .expect("indicators are all set");
        let sq = g.square(enc_hidden);
        let quad = g.weighted_sum(sq, &readout)?;
        let quad = g.scale(quad, 1e-2);
        let a = g.add(mcp, task)?;
        g.add(a, quad)
    };
    let report = check_params(&model.store, opts, loss)?;
    Ok(GradCheckRun {
        report,
        parameters: model.store.num_scalars(),
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone)]
pub struct McpOverfitConfig {
    pub instances: usize,
    pub length: usize,
    pub vocab: usize,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    /// Instances held out for the accuracy probe.
    pub eval_instances: usize,
}

impl Default for McpOverfitConfig {
    fn default() -> Self {
        McpOverfitConfig {
            instances: 2000,
            length: 32,
            vocab: 32,
            model: ModelConfig {
                d_model: 32,
                d_ff: 64,
                heads: 2,
                blocks: 2,
                experts: 2,
                ..ModelConfig::default()
            },
            pretrain: PretrainConfig {
                epochs: 100,
                batch_size: 16,
                max_steps: Some(2000),
                eval_every: Some(100),
                target_accuracy: Some(0.99),
                adam: AdamConfig {
                    lr: 3e-3,
                    ..AdamConfig::default()
                },
                ..PretrainConfig::default()
            },
            eval_instances: 200,
        }
    }
}

#[derive(Debug, Clone)]
pub struct McpOverfitResult {
    pub steps: usize,
    pub accuracy: f64,
    pub reached: bool,
    pub seconds: f64,
    /// `(step, validation masked accuracy)` at every probe.
    pub curve: Vec<(usize, f64)>,
}

/// Pre-trains on the deterministic-copy preset until the masked accuracy
/// of the probe split reaches the target or the step budget runs out.
pub fn mcp_overfit(cfg: &McpOverfitConfig, seed: u64) -> Result<McpOverfitResult> {
    let start = Instant::now();
    let data = SyntheticConfig::copy_task(cfg.instances + cfg.eval_instances, cfg.length, cfg.vocab);
    let ds = generate_synthetic(&data, seed)?;
    let (train, probe) = ds.instances.split_at(cfg.instances);
    let train = Dataset::new(ds.schema.clone(), train.to_vec())?;
    let probe = Dataset::new(ds.schema.clone(), probe.to_vec())?;
    let mut model = SuperMoe::new(&ds.schema, &cfg.model, seed)?;
    let report = pretrain(&mut model, &train, Some(&probe), &cfg.pretrain, seed, &mut |_| Ok(()))?;
    let curve: Vec<(usize, f64)> = report
        .records
        .iter()
        .filter(|r| r.split == "validation")
        .filter_map(|r| r.masked_accuracy.values().copied().reduce(f64::min).map(|a| (r.step, a)))
        .collect();
    Ok(McpOverfitResult {
        steps: report.steps,
        accuracy: curve.last().map_or(0.0, |c| c.1),
        reached: report.reached_target,
        seconds: start.elapsed().as_secs_f64(),
        curve,
    })
}

#[derive(Debug, Clone)]
pub struct SeesawConfig {
    pub seeds: Vec<u64>,
    pub data: SyntheticConfig,
    pub split: [f64; 3],
    pub model: ModelConfig,
    /// Shared by both arms; the bi-level arm switches `bilevel.enabled` on.
    pub finetune: FinetuneConfig,
}

impl Default for SeesawConfig {
    fn default() -> Self {
        SeesawConfig {
            seeds: vec![1, 2, 3, 4, 5],
            data: SyntheticConfig::conflict(1200, 16, 0.3),
            split: [0.6, 0.2, 0.2],
            model: ModelConfig {
                d_model: 16,
                d_ff: 32,
                heads: 2,
                blocks: 1,
                experts: 2,
                ..ModelConfig::default()
            },
            finetune: FinetuneConfig {
                epochs: 4,
                batch_size: 32,
                outer_batch_size: 240,
                adam: AdamConfig {
                    lr: 3e-3,
                    ..AdamConfig::default()
                },
                bilevel: BilevelConfig {
                    enabled: false,
                    eta_in: 0.1,
                    eta_out: 0.5,
                    inner_steps: 5,
                    ..BilevelConfig::default()
                },
                ..FinetuneConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct SeesawArm {
    pub val_auc: Vec<f64>,
    pub test_auc: Vec<f64>,
    pub final_lambda: Vec<f64>,
}

impl SeesawArm {
    pub fn mean_val_auc(&self) -> f64 {
        mean(&self.val_auc)
    }
}

#[derive(Debug, Clone)]
pub struct SeesawSeed {
    pub seed: u64,
    pub uniform: SeesawArm,
    pub bilevel: SeesawArm,
}

#[derive(Debug, Clone)]
pub struct SeesawResult {
    pub seeds: Vec<SeesawSeed>,
    pub seconds: f64,
}

impl SeesawResult {
    /// Mean over seeds of the task-averaged validation AUC, `(uniform, bilevel)`.
    pub fn mean_val_auc(&self) -> (f64, f64) {
        let u: Vec<f64> = self.seeds.iter().map(|s| s.uniform.mean_val_auc()).collect();
        let b: Vec<f64> = self.seeds.iter().map(|s| s.bilevel.mean_val_auc()).collect();
        (mean(&u), mean(&b))
    }

    pub fn mean_test_auc(&self) -> (f64, f64) {
        let u: Vec<f64> = self.seeds.iter().map(|s| mean(&s.uniform.test_auc)).collect();
        let b: Vec<f64> = self.seeds.iter().map(|s| mean(&s.bilevel.test_auc)).collect();
        (mean(&u), mean(&b))
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Train/validation/test splits with dense channels standardised on train.
pub fn prepare_splits(ds: &Dataset, ratios: &[f64], seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let (mut train, mut val, mut test) = split_dataset(ds, ratios, seed)?;
    let stats = DenseStats::fit(&train);
    for d in [&mut train, &mut val, &mut test] {
        stats.apply(d);
    }
    Ok((train, val, test))
}

fn seesaw_arm(cfg: &SeesawConfig, seed: u64, splits: &(Dataset, Dataset, Dataset), bilevel: bool) -> Result<SeesawArm> {
    let (train, val, test) = splits;
    let mut model = SuperMoe::new(&train.schema, &cfg.model, seed)?;
    let mut ft = cfg.finetune.clone();
    ft.bilevel.enabled = bilevel;
    let report = finetune(&mut model, train, Some(val), None, &ft, seed, &mut |_| Ok(()))?;
    let bs = ft.outer_batch_size.max(ft.batch_size);
    let v = evaluate_tasks(&model, val, ft.pooling, bs, "validation")?;
    let t = evaluate_tasks(&model, test, ft.pooling, bs, "test")?;
    Ok(SeesawArm {
        val_auc: v.task_auc.values().copied().collect(),
        test_auc: t.task_auc.values().copied().collect(),
        final_lambda: report.final_lambda,
    })
}

/// Paired comparison of fixed uniform weights against bi-level weighting on
/// the conflict dataset: same data, initialisation and step budget per seed.
pub fn seesaw(cfg: &SeesawConfig) -> Result<SeesawResult> {
    let start = Instant::now();
    let mut seeds = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let ds = generate_synthetic(&cfg.data, seed)?;
        let splits = prepare_splits(&ds, &cfg.split, seed)?;
        let uniform = seesaw_arm(cfg, seed, &splits, false)?;
        let bilevel = seesaw_arm(cfg, seed, &splits, true)?;
        log::info!(
            "seed {seed}: uniform {:.4}, bilevel {:.4}, lambda {:?}",
            uniform.mean_val_auc(),
            bilevel.mean_val_auc(),
            bilevel.final_lambda
        );
        seeds.push(SeesawSeed { seed, uniform, bilevel });
    }
    Ok(SeesawResult {
        seeds,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone)]
pub struct CapacityConfig {
    pub clusters: usize,
    pub dim: usize,
    pub d_ff: usize,
    pub samples: usize,
    /// Distance of cluster centres from the origin.
    pub separation: f64,
    pub steps: usize,
    pub lr: f64,
}

impl Default for CapacityConfig {
    fn default() -> Self {
        CapacityConfig {
            clusters: 4,
            dim: 8,
            d_ff: 16,
            samples: 512,
            separation: 4.0,
            steps: 600,
            lr: 1e-2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CapacityResult {
    pub moe_loss: f64,
    pub dense_loss: f64,
    /// Tokens per expert of the MoE model after training.
    pub moe_counts: Vec<usize>,
}

impl CapacityResult {
    /// `1 − moe/dense`.
    pub fn reduction(&self) -> f64 {
        1.0 - self.moe_loss / self.dense_loss
    }
}

/// Inputs drawn around `clusters` random centres; each cluster maps inputs
/// to targets through its own random linear map.
pub fn cluster_mixture(cfg: &CapacityConfig, seed: u64) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let d = cfg.dim;
    let centres: Vec<Vec<f64>> = (0..cfg.clusters)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| normal.sample(&mut rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| cfg.separation * x / n).collect()
        })
        .collect();
    let maps: Vec<Vec<f64>> = (0..cfg.clusters)
        .map(|_| (0..d * d).map(|_| normal.sample(&mut rng) / (d as f64).sqrt()).collect())
        .collect();
    let mut x = Vec::with_capacity(cfg.samples * d);
    let mut y = Vec::with_capacity(cfg.samples * d);
    for i in 0..cfg.samples {
        let k = i % cfg.clusters;
        let xi: Vec<f64> = (0..d).map(|j| centres[k][j] + normal.sample(&mut rng)).collect();
        for r in 0..d {
            y.push((0..d).map(|c| maps[k][r * d + c] * xi[c]).sum::<f64>());
        }
        x.extend(xi);
    }
    (
        Tensor::new(vec![cfg.samples, d], x).expect("shape"),
        Tensor::new(vec![cfg.samples, d], y).expect("shape"),
    )
}

fn train_ffn(cfg: &CapacityConfig, experts: usize, x: &Tensor, y: &Tensor, seed: u64) -> Result<(f64, Vec<usize>)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layer = MoeFfnLayer::new("ffn", cfg.dim, cfg.d_ff, cfg.dim, experts, GateConvention::Switch, &mut store, &mut rng)?;
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            warmup_frac: 0.0,
            ..AdamConfig::default()
        },
        &store,
    );
    let eval = |store: &ParamStore| -> Result<(Graph, Var, Vec<usize>)> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let yv = g.constant(y.clone());
        let (out, routing) = layer.forward(&mut g, store, xv)?;
        let diff = g.sub(out, yv)?;
        let sq = g.square(diff);
        let loss = g.mean(sq);
        Ok((g, loss, routing.expert_counts))
    };
    for _ in 0..cfg.steps {
        let (g, loss, _) = eval(&store)?;
        store.zero_grad();
        g.backward_into(loss, &mut store)?;
        adam.step(&mut store, cfg.lr);
    }
    let (g, loss, counts) = eval(&store)?;
    Ok((g.value(loss).data()[0], counts))
}

/// Final full-batch training loss of a top-1 MoE feed-forward layer with
/// one expert per cluster against the one-expert layer of the same width,
/// which costs the same per token.
pub fn moe_capacity(cfg: &CapacityConfig, seed: u64) -> Result<CapacityResult> {
    let (x, y) = cluster_mixture(cfg, seed);
    let (moe_loss, moe_counts) = train_ffn(cfg, cfg.clusters, &x, &y, seed)?;
    let (dense_loss, _) = train_ffn(cfg, 1, &x, &y, seed)?;
    Ok(CapacityResult {
        moe_loss,
        dense_loss,
        moe_counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_gradient_check_on_a_subset() {
        let opts = GradCheckOptions {
            max_coords_per_tensor: Some(3),
            ..GradCheckOptions::default()
        };
        let run = grad_check_tiny(&tiny_model_config(), 2, 8, 3, &opts).unwrap();
        assert!(run.report.passed(), "{:?}", run.report);
        assert!(run.report.checked > 100);
    }

    #[test]
    fn cluster_mixture_is_deterministic() {
        let cfg = CapacityConfig {
            samples: 16,
            ..CapacityConfig::default()
        };
        assert_eq!(cluster_mixture(&cfg, 4), cluster_mixture(&cfg, 4));
        assert_ne!(cluster_mixture(&cfg, 4).0, cluster_mixture(&cfg, 5).0);
    }
}
