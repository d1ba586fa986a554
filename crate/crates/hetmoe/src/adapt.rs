//! Efficient-adaptation procedures: usage measurement, router-only and
//! router-plus-experts fine-tuning, usage-based pruning, Top-K reduction,
//! hybrid recipes, and continual expert expansion.

use crate::error::{Error, Result};
use crate::model::{Model, ParamSelector};
use crate::ndgrad::Tape;
use crate::rng::Rng;
use crate::synthdata::{BatchStream, Dataset, Split};
use crate::trainer::{evaluate, train_step, EvalReport, OptimizerKind, TrainConfig, TrainState};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelectionPolicy {
    #[default]
    Random,
    MostUsed,
    LeastUsed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PrunePolicy {
    /// Remove the lowest-frequency ⌊f·N⌋ experts in each layer.
    Fraction { f: f64 },
    /// Remove every expert whose use frequency is below θ, per layer.
    Threshold { theta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HybridRecipe {
    /// Router + 1 expert, prune 2/3, Top-K = 2.
    A,
    /// Router + 2 experts, prune 2/3, Top-K = 3.
    B,
}

impl HybridRecipe {
    pub fn k_experts(self) -> usize {
        match self {
            HybridRecipe::A => 1,
            HybridRecipe::B => 2,
        }
    }
    pub fn prune_fraction(self) -> f64 {
        2.0 / 3.0
    }
    pub fn new_k(self) -> usize {
        match self {
            HybridRecipe::A => 2,
            HybridRecipe::B => 3,
        }
    }
}

/// Fine-tune budget shared by all adaptation modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptBudget {
    pub iters: usize,
    pub lr: f64,
    #[serde(default = "default_lambda")]
    pub lambda_mi: f64,
    pub seed: u64,
}

fn default_lambda() -> f64 {
    0.1
}

/// Per-layer map expert_id → fraction of samples whose Top-K set contains it.
pub type UsageFrequency = Vec<BTreeMap<u32, f64>>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptReport {
    pub mode: String,
    pub trainable_params: usize,
    pub model_params: usize,
    pub expert_evals_per_sample: usize,
    pub metrics_before: EvalReport,
    pub metrics_after: EvalReport,
    pub per_layer_usage: UsageFrequency,
}

/// One evaluation pass over a split counting, per layer, the fraction of
/// samples that routed through each expert.
pub fn measure_usage(model: &Model, dataset: &Dataset, split: Split) -> Result<UsageFrequency> {
    let batch = dataset.full(split);
    model.clear_vars();
    let mut tape = Tape::new();
    let (_, decisions) = model.forward(&mut tape, &batch)?;
    let layers: Vec<_> = model.moe_layers().collect();
    let mut usage = Vec::new();
    for (layer, dec) in layers.iter().zip(&decisions) {
        let mut freq: BTreeMap<u32, f64> = layer.experts.iter().map(|e| (e.id, 0.0)).collect();
        let n = dec.selected_ids.len();
        for ids in &dec.selected_ids {
            for &id in ids {
                *freq.get_mut(&id).ok_or_else(|| {
                    Error::Structural(format!("selected expert {id} missing from layer"))
                })? += 1.0;
            }
        }
        for v in freq.values_mut() {
            *v /= n as f64;
        }
        usage.push(freq);
    }
    Ok(usage)
}

fn finetune(model: &mut Model, dataset: &Dataset, budget: &AdaptBudget, iters: usize) -> Result<()> {
    let cfg = TrainConfig {
        total_iters: iters.max(1),
        peak_lr: budget.lr,
        warmup_frac: 0.1,
        clip_norm: 0.1,
        lambda_mi: budget.lambda_mi,
        optimizer: OptimizerKind::default(),
    };
    cfg.validate()?;
    let mut stream = BatchStream::new(vec![dataset.clone()], budget.seed);
    let mut state = TrainState::default();
    for _ in 0..iters {
        train_step(model, &mut stream, &cfg, &mut state)?;
    }
    Ok(())
}

fn count_trainable(model: &Model) -> usize {
    let mut n = 0;
    model.visit_params(&mut |_, p| {
        if !p.frozen {
            n += p.value.numel();
        }
    });
    n
}

/// Freeze the whole model, then unfreeze the target dataset's routers and
/// head plus the given per-layer expert ids.
fn freeze_except(model: &mut Model, dataset_id: u32, unfrozen_experts: &[Vec<u32>]) -> Result<()> {
    model.set_all_frozen(true);
    let mut per_layer = unfrozen_experts.iter();
    for layer in model.moe_layers_mut() {
        layer.set_router_frozen(dataset_id, false)?;
        if let Some(ids) = per_layer.next() {
            for &id in ids {
                layer.set_expert_frozen(id, false)?;
            }
        }
    }
    model
        .heads
        .get_mut(&dataset_id)
        .ok_or(Error::UnknownDataset(dataset_id))?
        .dense
        .set_frozen(false);
    Ok(())
}

fn register_from_spec(model: &mut Model, dataset: &Dataset, top_k: Option<usize>, seed: u64) -> Result<()> {
    let spec = &dataset.spec;
    model.register_dataset(
        spec.dataset_id,
        spec.task_kind,
        spec.generator.output_dim(),
        top_k,
        seed,
    )
}

fn build_report(
    model: &Model,
    dataset: &Dataset,
    mode: &str,
    trainable: usize,
    before: EvalReport,
) -> Result<AdaptReport> {
    Ok(AdaptReport {
        mode: mode.to_string(),
        trainable_params: trainable,
        model_params: model.param_count(ParamSelector::All),
        expert_evals_per_sample: model.expert_evals_per_sample(dataset.spec.dataset_id)?,
        metrics_before: before,
        metrics_after: evaluate(model, dataset, Split::Test)?,
        per_layer_usage: measure_usage(model, dataset, Split::Test)?,
    })
}

/// Register the new dataset and fine-tune only its routers and head.
pub fn adapt_router_only(
    model: &mut Model,
    dataset: &Dataset,
    budget: &AdaptBudget,
) -> Result<AdaptReport> {
    register_from_spec(model, dataset, None, budget.seed)?;
    let before = evaluate(model, dataset, Split::Test)?;
    freeze_except(model, dataset.spec.dataset_id, &[])?;
    let trainable = count_trainable(model);
    finetune(model, dataset, budget, budget.iters)?;
    build_report(model, dataset, "router_only", trainable, before)
}

/// Pick `k` expert ids per layer according to the selection policy. Usage
/// ties and the random draw are deterministic in the seed.
fn select_experts(
    model: &Model,
    dataset: &Dataset,
    k: usize,
    selection: SelectionPolicy,
    seed: u64,
) -> Result<Vec<Vec<u32>>> {
    let usage = match selection {
        SelectionPolicy::Random => None,
        _ => Some(measure_usage(model, dataset, Split::Train)?),
    };
    let mut out = Vec::new();
    for (li, layer) in model.moe_layers().enumerate() {
        if k > layer.n_experts() {
            return Err(Error::Structural(format!(
                "cannot select {k} experts from a layer of {}",
                layer.n_experts()
            )));
        }
        let ids: Vec<u32> = match selection {
            SelectionPolicy::Random => {
                let mut rng = Rng::stream(seed, 9000 + li as u64);
                let mut pool: Vec<u32> = layer.experts.iter().map(|e| e.id).collect();
                rng.shuffle(&mut pool);
                let mut chosen: Vec<u32> = pool.into_iter().take(k).collect();
                chosen.sort_unstable();
                chosen
            }
            SelectionPolicy::MostUsed | SelectionPolicy::LeastUsed => {
                let freq = &usage.as_ref().unwrap()[li];
                let mut ranked: Vec<(u32, f64)> = freq.iter().map(|(&id, &f)| (id, f)).collect();
                ranked.sort_by(|a, b| match selection {
                    SelectionPolicy::MostUsed => b
                        .1
                        .partial_cmp(&a.1)
                        .unwrap()
                        .then(a.0.cmp(&b.0)),
                    _ => a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)),
                });
                ranked.into_iter().take(k).map(|(id, _)| id).collect()
            }
        };
        out.push(ids);
    }
    Ok(out)
}

/// Router-only adaptation plus `k` unfrozen experts per MoE layer.
pub fn adapt_router_plus(
    model: &mut Model,
    dataset: &Dataset,
    k: usize,
    selection: SelectionPolicy,
    budget: &AdaptBudget,
) -> Result<AdaptReport> {
    register_from_spec(model, dataset, None, budget.seed)?;
    let before = evaluate(model, dataset, Split::Test)?;
    let chosen = select_experts(model, dataset, k, selection, budget.seed)?;
    freeze_except(model, dataset.spec.dataset_id, &chosen)?;
    let trainable = count_trainable(model);
    finetune(model, dataset, budget, budget.iters)?;
    build_report(
        model,
        dataset,
        &format!("router_plus_{k}"),
        trainable,
        before,
    )
}

/// Full fine-tune baseline: register the dataset and train every parameter.
pub fn adapt_full(model: &mut Model, dataset: &Dataset, budget: &AdaptBudget) -> Result<AdaptReport> {
    register_from_spec(model, dataset, None, budget.seed)?;
    let before = evaluate(model, dataset, Split::Test)?;
    model.set_all_frozen(false);
    let trainable = count_trainable(model);
    finetune(model, dataset, budget, budget.iters)?;
    build_report(model, dataset, "ft_full", trainable, before)
}

/// Decide, per layer, which expert ids a prune policy removes given the
/// measured frequencies. Checks admissibility against every router.
fn prune_victims(model: &Model, usage: &UsageFrequency, policy: &PrunePolicy) -> Result<Vec<BTreeSet<u32>>> {
    let layers: Vec<_> = model.moe_layers().collect();
    let mut victims = Vec::new();
    for (layer, freq) in layers.iter().zip(usage) {
        let mut ranked: Vec<(u32, f64)> = freq.iter().map(|(&id, &f)| (id, f)).collect();
        ranked.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        let remove: BTreeSet<u32> = match policy {
            PrunePolicy::Fraction { f } => {
                if !(0.0..1.0).contains(f) {
                    return Err(Error::Plan(format!("prune fraction {f} out of range")));
                }
                let n = (f * layer.n_experts() as f64 + 1e-9).floor() as usize;
                ranked.iter().take(n).map(|&(id, _)| id).collect()
            }
            PrunePolicy::Threshold { theta } => ranked
                .iter()
                .filter(|&&(_, f)| f < *theta)
                .map(|&(id, _)| id)
                .collect(),
        };
        for router in layer.routers.values() {
            let surviving = router
                .expert_ids
                .iter()
                .filter(|id| !remove.contains(id))
                .count();
            if surviving < router.top_k {
                return Err(Error::Plan(format!(
                    "pruning leaves router for dataset {} with {} experts < top_k {}",
                    router.dataset_id, surviving, router.top_k
                )));
            }
        }
        victims.push(remove);
    }
    Ok(victims)
}

/// Measure usage on the target dataset, remove the rarely used experts per
/// policy, then fine-tune the entire surviving model on the target.
pub fn prune_then_finetune(
    model: &mut Model,
    dataset: &Dataset,
    policy: &PrunePolicy,
    budget: &AdaptBudget,
) -> Result<AdaptReport> {
    let before = evaluate(model, dataset, Split::Test)?;
    let usage = measure_usage(model, dataset, Split::Train)?;
    let victims = prune_victims(model, &usage, policy)?;
    for (layer, remove) in model.moe_layers_mut().zip(&victims) {
        layer.remove_experts(remove)?;
    }
    model.set_all_frozen(false);
    let trainable = count_trainable(model);
    finetune(model, dataset, budget, budget.iters)?;
    build_report(model, dataset, "prune", trainable, before)
}

/// Replace the dataset's routers with freshly initialized ones at a smaller
/// Top-K, then fine-tune routers and head only.
pub fn topk_reduce(
    model: &mut Model,
    dataset: &Dataset,
    new_k: usize,
    budget: &AdaptBudget,
) -> Result<AdaptReport> {
    if new_k == 0 {
        return Err(Error::Config("new_k must be >= 1".into()));
    }
    let ds = dataset.spec.dataset_id;
    let current = model
        .datasets
        .get(&ds)
        .ok_or(Error::UnknownDataset(ds))?
        .top_k;
    if new_k >= current {
        return Err(Error::Plan(format!(
            "new_k {new_k} must be below the current top_k {current}"
        )));
    }
    let before = evaluate(model, dataset, Split::Test)?;
    let mut rng = Rng::stream(budget.seed, 9500 + u64::from(ds));
    for layer in model.moe_layers_mut() {
        layer.remove_router(ds);
        layer.add_router(ds, new_k, &mut rng)?;
    }
    model.datasets.get_mut(&ds).unwrap().top_k = new_k;
    freeze_except(model, ds, &[])?;
    let trainable = count_trainable(model);
    finetune(model, dataset, budget, budget.iters)?;
    build_report(model, dataset, &format!("topk_{new_k}"), trainable, before)
}

/// Combined recipe: register the new dataset with the reduced Top-K, warm up
/// the routers so that usage is informative, prune 2/3 by frequency, then
/// fine-tune the routers plus the recipe's expert allowance.
pub fn hybrid(
    model: &mut Model,
    dataset: &Dataset,
    recipe: HybridRecipe,
    budget: &AdaptBudget,
) -> Result<AdaptReport> {
    register_from_spec(model, dataset, Some(recipe.new_k()), budget.seed)?;
    let before = evaluate(model, dataset, Split::Test)?;
    let ds = dataset.spec.dataset_id;

    let warmup = budget.iters * 2 / 5;
    freeze_except(model, ds, &[])?;
    finetune(model, dataset, budget, warmup)?;

    let usage = measure_usage(model, dataset, Split::Train)?;
    let victims = prune_victims(
        model,
        &usage,
        &PrunePolicy::Fraction {
            f: recipe.prune_fraction(),
        },
    )?;
    for (layer, remove) in model.moe_layers_mut().zip(&victims) {
        layer.remove_experts(remove)?;
    }

    let chosen = select_experts(
        model,
        dataset,
        recipe.k_experts(),
        SelectionPolicy::Random,
        budget.seed,
    )?;
    freeze_except(model, ds, &chosen)?;
    let trainable = count_trainable(model);
    finetune(model, dataset, budget, budget.iters - warmup)?;
    let label = match recipe {
        HybridRecipe::A => "hybrid_a",
        HybridRecipe::B => "hybrid_b",
    };
    build_report(model, dataset, label, trainable, before)
}

/// Continual learning step: grow every MoE layer by `c` fresh experts, give
/// the new dataset routers over the grown pool, and train only the new parts.
/// Old routers cannot address the new experts, so prior datasets' outputs are
/// untouched by construction.
pub fn continual_step(
    model: &mut Model,
    dataset: &Dataset,
    c: usize,
    budget: &AdaptBudget,
) -> Result<AdaptReport> {
    let mut new_ids_per_layer = Vec::new();
    for layer in model.moe_layers_mut() {
        new_ids_per_layer.push(layer.add_experts(c, budget.seed));
    }
    register_from_spec(model, dataset, None, budget.seed)?;
    let before = evaluate(model, dataset, Split::Test)?;
    freeze_except(model, dataset.spec.dataset_id, &new_ids_per_layer)?;
    let trainable = count_trainable(model);
    finetune(model, dataset, budget, budget.iters)?;
    build_report(model, dataset, &format!("continual_c{c}"), trainable, before)
}
