//! Command-line front end. Every path is resolved against `--workdir`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{generate_synthetic, load_dataset_dir, split_dataset, write_dataset_dir, Dataset, DenseStats, Preset};
use crate::error::{Error, Result};
use crate::experiments::{grad_check_tiny, tiny_model_config};
use crate::finetune::{evaluate_tasks, export_embeddings, finetune, init_from_pretrained, EncoderMode};
use crate::gradcheck::GradCheckOptions;
use crate::metrics::{MetricsRecord, MetricsWriter};
use crate::model::SuperMoe;
use crate::pretrain::{evaluate_mcp, pretrain};

pub const THREADS_ENV: &str = "SUPERMOE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "supermoe", version, about = "Sparse MoE user representations: data, pre-training, fine-tuning, embeddings")]
struct Cli {
    /// Directory all other paths are relative to.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        #[arg(long, default_value = "siupd-like")]
        preset: String,
        #[arg(long)]
        instances: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Masked channel prediction pre-training.
    Pretrain {
        /// Dataset directory (default: the configured data source).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Fine-tune towers on a pre-trained encoder.
    Finetune {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Pre-trained checkpoint (default: fresh initialisation).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        freeze_encoder: bool,
        /// Enable bi-level task-weight optimisation.
        #[arg(long)]
        bilevel: bool,
    },
    /// Export one pooled embedding per user.
    Embed {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// train, validation, test or all.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Finite-difference check of every parameter of the tiny model.
    GradCheck {
        /// Check at most this many coordinates per tensor.
        #[arg(long)]
        coords: Option<usize>,
    },
}

/// Runs the command line and returns the process exit code: 0 on success,
/// 2 for usage or configuration errors, 1 for runtime failures.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            match e {
                Error::Config(_) => 2,
                _ => 1,
            }
        }
    }
}

/// Worker count from `SUPERMOE_THREADS`, defaulting to the available cores.
pub fn thread_count() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

struct Ctx {
    workdir: PathBuf,
    config: RunConfig,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        self.workdir.join(p)
    }

    fn dataset(&self, data: Option<&Path>) -> Result<Dataset> {
        match data.map(Path::to_path_buf).or_else(|| self.config.data.path.clone()) {
            Some(dir) => load_dataset_dir(&self.path(&dir)),
            None => generate_synthetic(&self.config.data.synthetic()?, self.config.seed),
        }
    }

    fn metrics(&self, path: Option<&Path>) -> Result<Option<MetricsWriter>> {
        path.map(|p| MetricsWriter::create(&self.path(p))).transpose()
    }
}

/// Truncates to the model length and splits; returns the dense statistics
/// fitted on the training split (or `stats` when given).
fn prepare(cfg: &RunConfig, mut ds: Dataset, stats: Option<&DenseStats>) -> Result<([Dataset; 3], DenseStats)> {
    ds.truncate_recent(cfg.model.max_len);
    let (mut train, mut val, mut test) = split_dataset(&ds, &cfg.data.split, cfg.seed)?;
    let stats = match (stats, cfg.data.standardize_dense) {
        (Some(s), _) => s.clone(),
        (None, true) => DenseStats::fit(&train),
        (None, false) => DenseStats::default(),
    };
    for d in [&mut train, &mut val, &mut test] {
        stats.apply(d);
    }
    Ok(([train, val, test], stats))
}

fn sink(writer: &mut Option<MetricsWriter>) -> impl FnMut(&MetricsRecord) -> Result<()> + '_ {
    move |rec| match writer {
        Some(w) => w.write(rec),
        None => Ok(()),
    }
}

fn summary(rec: &MetricsRecord) -> String {
    serde_json::to_string(rec).expect("record serialises")
}

fn execute(cli: Cli) -> Result<i32> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(&cli.workdir.join(p))?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    let ctx = Ctx {
        workdir: cli.workdir,
        config,
    };
    let cfg = &ctx.config;
    match cli.command {
        Command::GenData { preset, instances, out } => {
            let mut syn = preset.parse::<Preset>()?.config();
            if let Some(n) = instances {
                syn.num_instances = n;
            }
            let ds = generate_synthetic(&syn, cfg.seed)?;
            let dir = ctx.path(&out);
            write_dataset_dir(&dir, &ds)?;
            println!(
                "wrote {} instances to {}: {} channels, {} tasks, mean length {:.1}",
                ds.len(),
                dir.display(),
                ds.schema.channels.len(),
                ds.schema.tasks.len(),
                ds.mean_length()
            );
        }
        Command::Pretrain { data, out, metrics } => {
            let ([train, val, _], stats) = prepare(cfg, ctx.dataset(data.as_deref())?, None)?;
            let mut model = SuperMoe::new(&train.schema, &cfg.model, cfg.seed)?;
            let mut writer = ctx.metrics(metrics.as_deref())?;
            let val = (!val.is_empty()).then_some(&val);
            let report = pretrain(&mut model, &train, val, &cfg.pretrain, cfg.seed, &mut sink(&mut writer))?;
            let mut ckpt = Checkpoint::capture(cfg, &model.schema, &model.store, report.steps, report.rng.clone().expect("rng recorded"));
            ckpt.dense_stats = stats;
            ckpt.save(&ctx.path(&out))?;
            if let Some(last) = report.records.last() {
                println!("{}", summary(last));
            }
            println!("pre-trained {} steps; checkpoint {}", report.steps, ctx.path(&out).display());
        }
        Command::Finetune {
            data,
            checkpoint,
            out,
            metrics,
            freeze_encoder,
            bilevel,
        } => {
            let mut run_cfg = cfg.clone();
            run_cfg.finetune.freeze_encoder |= freeze_encoder;
            run_cfg.finetune.bilevel.enabled |= bilevel;
            let ds = ctx.dataset(data.as_deref())?;
            let mut model = match &checkpoint {
                Some(p) => {
                    let ckpt = Checkpoint::load(&ctx.path(p))?;
                    run_cfg.model = ckpt.config.model.clone();
                    let mode = if run_cfg.finetune.freeze_encoder { EncoderMode::Frozen } else { EncoderMode::Trainable };
                    init_from_pretrained(&ckpt, &ds.schema, mode, run_cfg.seed)?
                }
                None => SuperMoe::new(&ds.schema, &run_cfg.model, run_cfg.seed)?,
            };
            let ([train, val, test], stats) = prepare(&run_cfg, ds, None)?;
            let mut writer = ctx.metrics(metrics.as_deref())?;
            let report = finetune(
                &mut model,
                &train,
                Some(&val),
                Some(&test),
                &run_cfg.finetune,
                run_cfg.seed,
                &mut sink(&mut writer),
            )?;
            let mut ckpt = Checkpoint::capture(&run_cfg, &model.schema, &model.store, report.steps, report.rng.clone().expect("rng recorded"));
            ckpt.dense_stats = stats;
            ckpt.save(&ctx.path(&out))?;
            for rec in report.records.iter().rev().take(2).rev() {
                println!("{}", summary(rec));
            }
            println!(
                "fine-tuned {} steps; final task weights {:?}; checkpoint {}",
                report.steps,
                report.final_lambda,
                ctx.path(&out).display()
            );
        }
        Command::Embed { data, checkpoint, out } => {
            let source = checkpoint.display().to_string();
            let ckpt = Checkpoint::load(&ctx.path(&checkpoint))?;
            let model = SuperMoe::from_checkpoint(&ckpt)?;
            let mut ds = ctx.dataset(data.as_deref())?;
            ds.truncate_recent(ckpt.config.model.max_len);
            ckpt.dense_stats.apply(&mut ds);
            let n = export_embeddings(&model, &ds, &ctx.path(&out), ckpt.config.finetune.pooling, &source, thread_count()?)?;
            println!("wrote {n} embeddings of dimension {} to {}", model.config.d_model, ctx.path(&out).display());
        }
        Command::Eval {
            data,
            checkpoint,
            split,
            metrics,
        } => {
            let ckpt = Checkpoint::load(&ctx.path(&checkpoint))?;
            let model = SuperMoe::from_checkpoint(&ckpt)?;
            let run_cfg = &ckpt.config;
            let ([train, val, test], _) = prepare(run_cfg, ctx.dataset(data.as_deref())?, Some(&ckpt.dense_stats))?;
            let chosen: Vec<(&str, &Dataset)> = match split.as_str() {
                "train" => vec![("train", &train)],
                "validation" => vec![("validation", &val)],
                "test" => vec![("test", &test)],
                "all" => vec![("train", &train), ("validation", &val), ("test", &test)],
                other => return Err(Error::Config(format!("unknown split `{other}`"))),
            };
            let mut writer = ctx.metrics(metrics.as_deref())?;
            let bs = run_cfg.finetune.outer_batch_size.max(run_cfg.finetune.batch_size);
            for (name, ds) in chosen {
                if ds.is_empty() {
                    continue;
                }
                let mut rec = if model.towers.is_empty() {
                    MetricsRecord::new(ckpt.step, name)
                } else {
                    evaluate_tasks(&model, ds, run_cfg.finetune.pooling, bs, name)?
                };
                if !model.mcp.is_empty() {
                    let m = evaluate_mcp(&model, ds, run_cfg.pretrain.mask_rate, run_cfg.seed, bs)?.0;
                    rec.masked_accuracy = m.masked_accuracy;
                    if model.towers.is_empty() {
                        rec.task_loss = m.task_loss;
                        rec.expert_utilization = m.expert_utilization;
                    }
                }
                rec.step = ckpt.step;
                sink(&mut writer)(&rec)?;
                println!("{}", summary(&rec));
            }
        }
        Command::GradCheck { coords } => {
            let opts = GradCheckOptions {
                max_coords_per_tensor: coords,
                ..GradCheckOptions::default()
            };
            let run = grad_check_tiny(&tiny_model_config(), 2, 8, cfg.seed, &opts)?;
            let r = &run.report;
            println!(
                "checked {} coordinates of {} parameters ({} skipped at kinks) in {:.1}s",
                r.checked, run.parameters, r.skipped_kinks, run.seconds
            );
            println!("max relative error {:.3e} (tolerance {:.0e})", r.max_rel_error, r.tolerance);
            if let Some((name, i)) = &r.worst {
                println!("worst coordinate {name}[{i}]");
            }
            if !r.passed() {
                eprintln!("error[numeric]: gradient check failed");
                return Ok(1);
            }
        }
    }
    Ok(0)
}
