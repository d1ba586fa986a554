//! Training loop pieces: LR schedule, optimizer, single-step update with
//! global-norm clipping, and evaluation.

use crate::error::{Error, Result};
use crate::model::Model;
use crate::ndgrad::{clip_global_norm, Tape, Tensor};
use crate::objectives::{batch_usage, buffer_update, mi_loss_surrogate, task_loss, UsageSnapshot};
use crate::synthdata::{Batch, BatchStream, Dataset, Split, Targets};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

fn default_peak_lr() -> f64 {
    3e-3
}
fn default_warmup() -> f64 {
    0.1
}
fn default_clip() -> f64 {
    0.1
}
fn default_lambda() -> f64 {
    0.1
}
fn default_beta() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    SgdMomentum {
        #[serde(default = "default_beta")]
        beta: f64,
    },
    Adam {
        #[serde(default = "default_beta")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::SgdMomentum {
            beta: default_beta(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub total_iters: usize,
    #[serde(default = "default_peak_lr")]
    pub peak_lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup_frac: f64,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    #[serde(default = "default_lambda")]
    pub lambda_mi: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_iters == 0 {
            return Err(Error::Config("total_iters must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::Config("warmup_frac must be in [0, 1)".into()));
        }
        if self.peak_lr <= 0.0 || self.clip_norm <= 0.0 {
            return Err(Error::Config("peak_lr and clip_norm must be positive".into()));
        }
        if self.lambda_mi < 0.0 {
            return Err(Error::Config("lambda_mi must be non-negative".into()));
        }
        Ok(())
    }

    /// Triangular schedule: linear 0 → peak over the warmup fraction, then
    /// linear peak → 0 over the remainder.
    pub fn lr_at(&self, iter: usize) -> f64 {
        let t = (iter + 1) as f64 / self.total_iters as f64;
        if t <= self.warmup_frac {
            self.peak_lr * t / self.warmup_frac
        } else {
            self.peak_lr * (1.0 - t) / (1.0 - self.warmup_frac)
        }
    }
}

/// Optimizer moment buffers, keyed by stable parameter path.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct OptState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub step: u64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainState {
    pub iter: usize,
    pub opt: OptState,
}

/// One metrics line per optimizer step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepReport {
    pub iter: usize,
    pub dataset_id: u32,
    pub task_loss: f64,
    pub mi_loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    /// Per MoE layer: batch estimate of P(E | D) over the layer's experts.
    pub usage: Vec<Vec<f64>>,
}

impl StepReport {
    pub fn to_ndjson(&self) -> String {
        serde_json::to_string(self).expect("step report serializes")
    }

    /// Parses one NDJSON metrics line, e.g. for offline analysis of a
    /// metrics file written during training.
    pub fn from_ndjson(line: &str) -> Result<Self> {
        serde_json::from_str(line).map_err(Error::from)
    }
}

fn apply_update(
    kind: &OptimizerKind,
    opt: &mut OptState,
    path: &str,
    value: &mut Tensor,
    grad: &Tensor,
    lr: f64,
) {
    match kind {
        OptimizerKind::SgdMomentum { beta } => {
            let m = opt
                .m
                .entry(path.to_string())
                .or_insert_with(|| Tensor::zeros(&value.shape));
            for ((mv, &g), p) in m.data.iter_mut().zip(&grad.data).zip(&mut value.data) {
                *mv = beta * *mv + g;
                *p -= lr * *mv;
            }
        }
        OptimizerKind::Adam { beta1, beta2, eps } => {
            let t = opt.step as f64;
            let m = opt
                .m
                .entry(path.to_string())
                .or_insert_with(|| Tensor::zeros(&value.shape));
            let v = opt
                .v
                .entry(path.to_string())
                .or_insert_with(|| Tensor::zeros(&value.shape));
            let bc1 = 1.0 - beta1.powf(t);
            let bc2 = 1.0 - beta2.powf(t);
            for (((mv, vv), &g), p) in m
                .data
                .iter_mut()
                .zip(v.data.iter_mut())
                .zip(&grad.data)
                .zip(&mut value.data)
            {
                *mv = beta1 * *mv + (1.0 - beta1) * g;
                *vv = beta2 * *vv + (1.0 - beta2) * g * g;
                *p -= lr * (*mv / bc1) / ((*vv / bc2).sqrt() + eps);
            }
        }
    }
}

/// Run one optimizer step on the next sampled batch: forward, weighted task
/// loss plus λ · Σ_layers MI surrogate, backward, clip, update, then refresh
/// the momentum buffers.
pub fn train_step(
    model: &mut Model,
    stream: &mut BatchStream,
    cfg: &TrainConfig,
    state: &mut TrainState,
) -> Result<StepReport> {
    let batch = stream.next()?;
    let w_loss = stream
        .datasets()
        .iter()
        .find(|d| d.spec.dataset_id == batch.dataset_id)
        .map(|d| d.spec.w_loss)
        .ok_or(Error::UnknownDataset(batch.dataset_id))?;
    let lr = cfg.lr_at(state.iter);

    model.clear_vars();
    let mut tape = Tape::new();
    let (out, decisions) = model.forward(&mut tape, &batch)?;

    for (i, dec) in decisions.iter().enumerate() {
        if !dec.probs_value.is_finite() {
            return Err(Error::Numeric {
                op: "train_step",
                msg: format!("non-finite router output in block {i}"),
            });
        }
    }

    let t_loss = task_loss(&mut tape, out, &batch.targets)?;
    let t_loss_value = tape.value(t_loss).data[0];
    let mut loss = tape.scale(t_loss, w_loss);

    let n_datasets = model.datasets.len();
    let mut snapshots: Vec<UsageSnapshot> = Vec::new();
    let mut mi_value = 0.0;
    if cfg.lambda_mi > 0.0 {
        let mut dec_iter = decisions.iter();
        for i in 0..model.blocks.len() {
            if model.blocks[i].moe.is_none() {
                continue;
            }
            let dec = dec_iter.next().expect("one decision per MoE layer");
            let (cols, uninitialized) = {
                let layer = model.blocks[i].moe.as_ref().unwrap();
                (
                    layer.buffer_cols(batch.dataset_id)?,
                    layer.buffer.row(batch.dataset_id).is_none(),
                )
            };
            let snap = batch_usage(&mut tape, dec, batch.dataset_id, n_datasets, cols)?;
            if uninitialized {
                // first contact with this dataset: seed the buffer row with
                // the batch estimate so the surrogate has a reference point
                buffer_update(&mut model.blocks[i].moe.as_mut().unwrap().buffer, &snap);
            }
            let layer = model.blocks[i].moe.as_ref().unwrap();
            let mi = mi_loss_surrogate(&mut tape, &snap, &layer.buffer)?;
            mi_value += tape.value(mi).data[0];
            let scaled = tape.scale(mi, cfg.lambda_mi);
            loss = tape.add(loss, scaled)?;
            snapshots.push(snap);
        }
    }

    let loss_value = tape.value(loss).data[0];
    if !loss_value.is_finite() {
        return Err(Error::Numeric {
            op: "train_step",
            msg: format!(
                "non-finite loss at iter {} on dataset {}",
                state.iter, batch.dataset_id
            ),
        });
    }
    tape.backward(loss)?;

    // gather gradients of unfrozen parameters, clip globally, apply
    let mut paths = Vec::new();
    let mut grads = Vec::new();
    model.visit_params(&mut |path, p| {
        if !p.frozen {
            if let Some(var) = p.last_var() {
                paths.push(path);
                grads.push(tape.grad(var));
            }
        }
    });
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric {
            op: "train_step",
            msg: format!("non-finite gradient at iter {}", state.iter),
        });
    }
    let grad_norm = clip_global_norm(&mut grads, cfg.clip_norm);
    let by_path: BTreeMap<String, Tensor> = paths.into_iter().zip(grads).collect();

    state.opt.step += 1;
    let kind = cfg.optimizer.clone();
    let opt = &mut state.opt;
    model.visit_params_mut(&mut |path, p| {
        if let Some(g) = by_path.get(&path) {
            apply_update(&kind, opt, &path, &mut p.value, g, lr);
        }
    });

    // momentum buffers are refreshed only after the surrogate consumed the
    // previous estimate
    let usage: Vec<Vec<f64>> = {
        let mut per_layer = Vec::new();
        for (layer, snap) in model.moe_layers_mut().zip(&snapshots) {
            let mut row = vec![0.0; layer.buffer.n_experts()];
            for (&c, &p) in snap.cols.iter().zip(&snap.p_joint_value) {
                row[c] = p * n_datasets as f64;
            }
            per_layer.push(row);
            buffer_update(&mut layer.buffer, snap);
        }
        per_layer
    };

    let report = StepReport {
        iter: state.iter,
        dataset_id: batch.dataset_id,
        task_loss: t_loss_value,
        mi_loss: mi_value,
        lr,
        grad_norm,
        usage,
    };
    state.iter += 1;
    Ok(report)
}

/// Evaluation result on one split of one dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset_id: u32,
    pub n: usize,
    pub avg_loss: f64,
    pub accuracy: Option<f64>,
    pub mse: Option<f64>,
    pub r2: Option<f64>,
    /// Per MoE layer: selection frequency of each expert over the split.
    pub expert_usage: Vec<Vec<f64>>,
}

/// Forward the full split without updating anything and report task metrics
/// plus expert selection frequencies.
pub fn evaluate(model: &Model, dataset: &Dataset, split: Split) -> Result<EvalReport> {
    let batch = dataset.full(split);
    let n = match &batch.targets {
        Targets::Labels(l) => l.len(),
        Targets::Values(t) => t.rows(),
    };
    model.clear_vars();
    let mut tape = Tape::new();
    let (out, decisions) = model.forward(&mut tape, &batch)?;
    let loss = task_loss(&mut tape, out, &batch.targets)?;
    let avg_loss = tape.value(loss).data[0];
    let out_t = tape.value(out).clone();

    let (accuracy, mse, r2) = match &batch.targets {
        Targets::Labels(labels) => {
            let c = out_t.cols();
            let correct = labels
                .iter()
                .enumerate()
                .filter(|&(i, &y)| {
                    let row = &out_t.data[i * c..(i + 1) * c];
                    let argmax = row
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .map(|(j, _)| j)
                        .unwrap();
                    argmax == y
                })
                .count();
            (Some(correct as f64 / n as f64), None, None)
        }
        Targets::Values(t) => {
            let sse: f64 = out_t
                .data
                .iter()
                .zip(&t.data)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let mean = t.data.iter().sum::<f64>() / t.data.len() as f64;
            let sst: f64 = t.data.iter().map(|v| (v - mean) * (v - mean)).sum();
            let mse = sse / t.data.len() as f64;
            let r2 = if sst > 0.0 { 1.0 - sse / sst } else { 0.0 };
            (None, Some(mse), Some(r2))
        }
    };

    let layers: Vec<_> = model.moe_layers().collect();
    let mut expert_usage = Vec::new();
    for (layer, dec) in layers.iter().zip(&decisions) {
        let mut counts = vec![0.0; layer.n_experts()];
        let mut total = 0.0;
        for ids in &dec.selected_ids {
            for &id in ids {
                let pos = layer
                    .expert_position(id)
                    .ok_or_else(|| Error::Structural(format!("expert {id} missing from layer")))?;
                counts[pos] += 1.0;
                total += 1.0;
            }
        }
        if total > 0.0 {
            for c in &mut counts {
                *c /= total;
            }
        }
        expert_usage.push(counts);
    }

    Ok(EvalReport {
        dataset_id: batch.dataset_id,
        n,
        avg_loss,
        accuracy,
        mse,
        r2,
        expert_usage,
    })
}

/// Evaluate a registered dataset against a batch built elsewhere (used by the
/// CLI for held-out generators).
pub fn evaluate_batch(model: &Model, batch: &Batch) -> Result<f64> {
    model.clear_vars();
    let mut tape = Tape::new();
    let (out, _) = model.forward(&mut tape, batch)?;
    let loss = task_loss(&mut tape, out, &batch.targets)?;
    Ok(tape.value(loss).data[0])
}
