//! Command-line entry points: train, adapt, expand, eval, gradcheck.

use crate::adapt::{
    adapt_full, adapt_router_only, adapt_router_plus, continual_step, hybrid, prune_then_finetune,
    topk_reduce, AdaptBudget, AdaptReport,
};
use crate::checkpoint::{Checkpoint, CHECKPOINT_VERSION};
use crate::config::{load_config, AdaptMode, AdaptPlan, RunConfig};
use crate::error::{Error, Result};
use crate::gradcheck;
use crate::model::Model;
use crate::synthdata::{BatchStream, Dataset, DatasetSpec, Split};
use crate::trainer::{evaluate, train_step, EvalReport, TrainState};
use clap::{Parser, Subcommand};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "hetmoe", version, about = "Multi-task MoE training and adaptation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Pretrain on the configured dataset mixture and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Newline-delimited JSON metrics, one line per step.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the config's adaptation plan against a checkpoint.
    Adapt {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Continual expert expansion for a new dataset.
    Expand {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on its registered datasets.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated dataset ids; defaults to all.
        #[arg(long)]
        datasets: Option<String>,
    },
    /// Run the finite-difference gradient battery.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

/// Number of dataset-generation worker threads, from HETMOE_THREADS
/// (default 1).
fn thread_cap() -> usize {
    std::env::var("HETMOE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Generate all datasets, at most `HETMOE_THREADS` in flight, preserving
/// spec order.
pub fn generate_all(specs: &[DatasetSpec]) -> Result<Vec<Dataset>> {
    let n_workers = thread_cap().min(specs.len().max(1));
    if n_workers <= 1 {
        return specs.iter().map(Dataset::generate).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<Option<Result<Dataset>>>> =
        specs.iter().map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..n_workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= specs.len() {
                    break;
                }
                *slots[i].lock().unwrap() = Some(Dataset::generate(&specs[i]));
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().unwrap().expect("worker filled slot"))
        .collect()
}

fn register_all(model: &mut Model, specs: &[DatasetSpec], seed: u64) -> Result<()> {
    for spec in specs {
        model.register_dataset(
            spec.dataset_id,
            spec.task_kind,
            spec.generator.output_dim(),
            None,
            seed,
        )?;
    }
    Ok(())
}

fn make_checkpoint(
    run_config: RunConfig,
    dataset_specs: Vec<DatasetSpec>,
    model: Model,
    train_state: TrainState,
    stream: &BatchStream,
) -> Checkpoint {
    Checkpoint {
        version: CHECKPOINT_VERSION,
        run_config,
        dataset_specs,
        model,
        train_state,
        stream_state: stream.state().clone(),
    }
}

fn cmd_train(config: &Path, out: &Path, metrics: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let datasets = generate_all(&cfg.datasets)?;
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    register_all(&mut model, &cfg.datasets, cfg.seed)?;
    let mut stream = BatchStream::new(datasets, cfg.seed);
    let mut state = TrainState::default();

    let mut metrics_out: Option<std::io::BufWriter<std::fs::File>> = metrics
        .map(std::fs::File::create)
        .transpose()?
        .map(std::io::BufWriter::new);
    for _ in 0..cfg.train.total_iters {
        let report = train_step(&mut model, &mut stream, &cfg.train, &mut state)?;
        if let Some(w) = metrics_out.as_mut() {
            writeln!(w, "{}", report.to_ndjson())?;
        }
    }
    if let Some(mut w) = metrics_out {
        w.flush()?;
    }

    let specs = stream.specs();
    make_checkpoint(cfg, specs, model, state, &stream).save(out)?;
    Ok(())
}

fn run_adapt_plan(
    model: &mut Model,
    plan: &AdaptPlan,
    ckpt_specs: &[DatasetSpec],
    seed: u64,
) -> Result<(AdaptReport, Option<DatasetSpec>)> {
    let budget = AdaptBudget {
        iters: plan.iters,
        lr: plan.lr,
        lambda_mi: plan.lambda_mi,
        seed,
    };
    match &plan.mode {
        AdaptMode::Prune { .. } | AdaptMode::TopkReduce { .. } => {
            let id = plan
                .dataset_id
                .ok_or_else(|| Error::Plan("missing target dataset_id".into()))?;
            let spec = ckpt_specs
                .iter()
                .find(|s| s.dataset_id == id)
                .ok_or_else(|| Error::Missing(format!("dataset {id}")))?;
            let dataset = Dataset::generate(spec)?;
            let report = match &plan.mode {
                AdaptMode::Prune { policy } => {
                    prune_then_finetune(model, &dataset, policy, &budget)?
                }
                AdaptMode::TopkReduce { new_k } => topk_reduce(model, &dataset, *new_k, &budget)?,
                _ => unreachable!(),
            };
            Ok((report, None))
        }
        mode => {
            let spec = plan
                .dataset
                .as_ref()
                .ok_or_else(|| Error::Plan("missing new dataset spec".into()))?;
            if ckpt_specs.iter().any(|s| s.dataset_id == spec.dataset_id) {
                return Err(Error::Plan(format!(
                    "dataset {} is already registered",
                    spec.dataset_id
                )));
            }
            let dataset = Dataset::generate(spec)?;
            let report = match mode {
                AdaptMode::RouterOnly => adapt_router_only(model, &dataset, &budget)?,
                AdaptMode::RouterPlusExperts { k, selection } => {
                    adapt_router_plus(model, &dataset, *k, *selection, &budget)?
                }
                AdaptMode::Hybrid { recipe } => hybrid(model, &dataset, *recipe, &budget)?,
                AdaptMode::FtFull => adapt_full(model, &dataset, &budget)?,
                _ => unreachable!(),
            };
            Ok((report, Some(spec.clone())))
        }
    }
}

fn cmd_adapt(config: &Path, checkpoint: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config)?;
    let plan = cfg
        .adapt
        .clone()
        .ok_or_else(|| Error::Plan("config has no adapt section".into()))?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let seed = seed.unwrap_or(cfg.seed);
    let mut model = ckpt.model.clone();

    let (report, new_spec) = run_adapt_plan(&mut model, &plan, &ckpt.dataset_specs, seed)?;
    println!("{}", serde_json::to_string_pretty(&report)?);

    let mut specs = ckpt.dataset_specs.clone();
    if let Some(spec) = new_spec {
        specs.push(spec);
    }
    let mut run_config = ckpt.run_config.clone();
    run_config.adapt = Some(plan);
    let stream = BatchStream::new(generate_all(&specs)?, seed);
    make_checkpoint(run_config, specs, model, ckpt.train_state, &stream).save(out)?;
    Ok(())
}

fn cmd_expand(config: &Path, checkpoint: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config)?;
    let plan = cfg
        .expand
        .clone()
        .ok_or_else(|| Error::Plan("config has no expand section".into()))?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let seed = seed.unwrap_or(cfg.seed);
    let mut model = ckpt.model.clone();
    if ckpt
        .dataset_specs
        .iter()
        .any(|s| s.dataset_id == plan.dataset.dataset_id)
    {
        return Err(Error::Plan(format!(
            "dataset {} is already registered",
            plan.dataset.dataset_id
        )));
    }

    let old_datasets = generate_all(&ckpt.dataset_specs)?;
    let before: Vec<EvalReport> = old_datasets
        .iter()
        .map(|d| evaluate(&model, d, Split::Test))
        .collect::<Result<_>>()?;

    let budget = AdaptBudget {
        iters: plan.iters,
        lr: plan.lr,
        lambda_mi: plan.lambda_mi,
        seed,
    };
    let new_dataset = Dataset::generate(&plan.dataset)?;
    let report = continual_step(&mut model, &new_dataset, plan.c, &budget)?;

    let after: Vec<EvalReport> = old_datasets
        .iter()
        .map(|d| evaluate(&model, d, Split::Test))
        .collect::<Result<_>>()?;
    let doc = serde_json::json!({
        "report": report,
        "old_datasets_before": before,
        "old_datasets_after": after,
    });
    println!("{}", serde_json::to_string_pretty(&doc)?);

    let mut specs = ckpt.dataset_specs.clone();
    specs.push(plan.dataset.clone());
    let mut run_config = ckpt.run_config.clone();
    run_config.expand = Some(plan);
    let stream = BatchStream::new(generate_all(&specs)?, seed);
    make_checkpoint(run_config, specs, model, ckpt.train_state, &stream).save(out)?;
    Ok(())
}

fn cmd_eval(checkpoint: &Path, datasets: Option<&str>) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let ids: Vec<u32> = match datasets {
        Some(sel) => sel
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<u32>()
                    .map_err(|_| Error::Config(format!("bad dataset selector entry {s:?}")))
            })
            .collect::<Result<_>>()?,
        None => ckpt.dataset_specs.iter().map(|s| s.dataset_id).collect(),
    };
    for id in ids {
        let spec = ckpt
            .dataset_specs
            .iter()
            .find(|s| s.dataset_id == id)
            .ok_or_else(|| Error::Missing(format!("dataset {id}")))?;
        let dataset = Dataset::generate(spec)?;
        let report = evaluate(&ckpt.model, &dataset, Split::Test)?;
        println!("{}", serde_json::to_string(&report)?);
    }
    Ok(())
}

fn cmd_gradcheck(seed: u64) -> Result<()> {
    let results = gradcheck::run_battery_strict(seed)?;
    for r in &results {
        println!("{:<28} max rel err {:.3e}", r.name, r.max_rel_err);
    }
    println!("gradcheck ok: {} checks below {:.0e}", results.len(), gradcheck::TOLERANCE);
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Train {
            config,
            out,
            metrics,
            seed,
        } => cmd_train(config, out, metrics.as_deref(), *seed),
        Command::Adapt {
            config,
            checkpoint,
            out,
            seed,
        } => cmd_adapt(config, checkpoint, out, *seed),
        Command::Expand {
            config,
            checkpoint,
            out,
            seed,
        } => cmd_expand(config, checkpoint, out, *seed),
        Command::Eval {
            checkpoint,
            datasets,
        } => cmd_eval(checkpoint, datasets.as_deref()),
        Command::Gradcheck { seed } => cmd_gradcheck(*seed),
    }
}
