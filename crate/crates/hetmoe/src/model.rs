//! Shared backbone (alternating dense and MoE blocks with residuals) plus
//! per-dataset heads; forward dispatch by dataset id.

use crate::error::{Error, Result};
use crate::moe::{GateDecision, MoELayer};
use crate::ndgrad::{Param, Tape, Tensor, Var};
use crate::rng::Rng;
use crate::synthdata::{Batch, TaskKind};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

fn default_d() -> usize {
    64
}
fn default_blocks() -> usize {
    4
}
fn default_stride() -> usize {
    1
}
fn default_experts() -> usize {
    12
}
fn default_top_k() -> usize {
    4
}
fn default_budget() -> usize {
    256
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_in: usize,
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "default_blocks")]
    pub n_blocks: usize,
    /// Stride controlling which blocks carry an MoE layer (1 = every block).
    #[serde(default = "default_stride")]
    pub moe_every: usize,
    #[serde(default = "default_experts")]
    pub n_experts: usize,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    /// Total active expert hidden width per forward; each expert gets
    /// hidden_budget / top_k when flops_matched.
    #[serde(default = "default_budget")]
    pub hidden_budget: usize,
    #[serde(default = "default_true")]
    pub flops_matched: bool,
    /// Fixed per-expert hidden width when flops_matched is off.
    #[serde(default)]
    pub expert_hidden: Option<usize>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.n_experts < self.top_k {
            return Err(Error::Config(format!(
                "need n_experts >= top_k >= 1, got {} and {}",
                self.n_experts, self.top_k
            )));
        }
        if self.d_in == 0 || self.d == 0 || self.n_blocks == 0 || self.moe_every == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.flops_matched && self.hidden_budget % self.top_k != 0 {
            return Err(Error::Config(format!(
                "hidden_budget {} not divisible by top_k {}",
                self.hidden_budget, self.top_k
            )));
        }
        if !self.flops_matched && self.expert_hidden.is_none() {
            return Err(Error::Config(
                "expert_hidden required when flops_matched is off".into(),
            ));
        }
        Ok(())
    }

    pub fn expert_hidden_width(&self) -> usize {
        if self.flops_matched {
            self.hidden_budget / self.top_k
        } else {
            self.expert_hidden.unwrap_or(self.hidden_budget)
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseLayer {
    pub w: Param,
    pub b: Param,
}

impl DenseLayer {
    pub fn new(d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        DenseLayer {
            w: Param::new(Tensor::init_uniform(&[d_in, d_out], d_in, rng)),
            b: Param::new(Tensor::init_uniform(&[d_out], d_in, rng)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = self.w.watch(tape);
        let b = self.b.watch(tape);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }

    pub fn param_count(&self) -> usize {
        self.w.value.numel() + self.b.value.numel()
    }

    pub fn set_frozen(&mut self, flag: bool) {
        self.w.frozen = flag;
        self.b.frozen = flag;
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Block {
    pub dense: DenseLayer,
    pub moe: Option<MoELayer>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Head {
    pub dense: DenseLayer,
    pub task_kind: TaskKind,
    pub out_dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamSelector {
    All,
    Backbone,
    Routers,
    Experts,
    Heads,
}

/// Per-dataset registration info kept by the model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub task_kind: TaskKind,
    pub out_dim: usize,
    pub top_k: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub embed: DenseLayer,
    pub blocks: Vec<Block>,
    pub heads: BTreeMap<u32, Head>,
    pub datasets: BTreeMap<u32, DatasetEntry>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = Rng::stream(seed, 7001);
        let embed = DenseLayer::new(config.d_in, config.d, &mut rng);
        let h = config.expert_hidden_width();
        let blocks = (0..config.n_blocks)
            .map(|i| {
                let dense = DenseLayer::new(config.d, config.d, &mut rng);
                let moe = if i % config.moe_every == 0 {
                    Some(MoELayer::new(i as u32, config.d, h, config.n_experts, &mut rng))
                } else {
                    None
                };
                Block { dense, moe }
            })
            .collect();
        Ok(Model {
            config,
            embed,
            blocks,
            heads: BTreeMap::new(),
            datasets: BTreeMap::new(),
        })
    }

    pub fn moe_layers(&self) -> impl Iterator<Item = &MoELayer> {
        self.blocks.iter().filter_map(|b| b.moe.as_ref())
    }

    pub fn moe_layers_mut(&mut self) -> impl Iterator<Item = &mut MoELayer> {
        self.blocks.iter_mut().filter_map(|b| b.moe.as_mut())
    }

    /// Register a new dataset: one fresh router per MoE layer (sized to the
    /// current expert pool) plus one head. Optionally with a smaller Top-K
    /// than pretraining used.
    pub fn register_dataset(
        &mut self,
        dataset_id: u32,
        task_kind: TaskKind,
        out_dim: usize,
        top_k_override: Option<usize>,
        seed: u64,
    ) -> Result<()> {
        if self.datasets.contains_key(&dataset_id) {
            return Err(Error::Structural(format!(
                "dataset {dataset_id} already registered"
            )));
        }
        let top_k = top_k_override.unwrap_or(self.config.top_k);
        let mut rng = Rng::stream(seed, 7100 + u64::from(dataset_id));
        for layer in self.blocks.iter_mut().filter_map(|b| b.moe.as_mut()) {
            layer.add_router(dataset_id, top_k, &mut rng)?;
        }
        let head = Head {
            dense: DenseLayer::new(self.config.d, out_dim, &mut rng),
            task_kind,
            out_dim,
        };
        self.heads.insert(dataset_id, head);
        self.datasets.insert(
            dataset_id,
            DatasetEntry {
                task_kind,
                out_dim,
                top_k,
            },
        );
        Ok(())
    }

    /// Drop a dataset's routers and head (used when re-registering with a
    /// different Top-K).
    pub fn unregister_dataset(&mut self, dataset_id: u32) -> Result<()> {
        if self.datasets.remove(&dataset_id).is_none() {
            return Err(Error::Missing(format!("dataset {dataset_id}")));
        }
        for layer in self.moe_layers_mut() {
            layer.remove_router(dataset_id);
        }
        self.heads.remove(&dataset_id);
        Ok(())
    }

    /// Forward pass for one batch; returns the head output and the gate
    /// decisions of every MoE layer in block order.
    pub fn forward(&self, tape: &mut Tape, batch: &Batch) -> Result<(Var, Vec<GateDecision>)> {
        let head = self
            .heads
            .get(&batch.dataset_id)
            .ok_or(Error::UnknownDataset(batch.dataset_id))?;
        let x = tape.leaf(&batch.x);
        let mut x = self.embed.forward(tape, x)?;
        let mut decisions = Vec::new();
        for block in &self.blocks {
            let h = block.dense.forward(tape, x)?;
            let h = tape.tanh(h);
            match &block.moe {
                Some(layer) => {
                    let (y, decision) = layer.forward(tape, h, batch.dataset_id)?;
                    decisions.push(decision);
                    x = tape.add(x, y)?;
                }
                None => x = h,
            }
        }
        let out = head.dense.forward(tape, x)?;
        Ok((out, decisions))
    }

    pub fn param_count(&self, selector: ParamSelector) -> usize {
        let experts: usize = self
            .moe_layers()
            .map(|l| l.experts.iter().map(|e| e.param_count()).sum::<usize>())
            .sum();
        let routers: usize = self
            .moe_layers()
            .map(|l| l.routers.values().map(|r| r.w_g.value.numel()).sum::<usize>())
            .sum();
        let heads: usize = self.heads.values().map(|h| h.dense.param_count()).sum();
        let dense: usize = self.embed.param_count()
            + self.blocks.iter().map(|b| b.dense.param_count()).sum::<usize>();
        match selector {
            ParamSelector::Experts => experts,
            ParamSelector::Routers => routers,
            ParamSelector::Heads => heads,
            ParamSelector::Backbone => dense + experts,
            ParamSelector::All => dense + experts + routers + heads,
        }
    }

    /// Expert evaluations per sample per forward pass for a dataset: the
    /// desk-scale compute proxy.
    pub fn expert_evals_per_sample(&self, dataset_id: u32) -> Result<usize> {
        let entry = self
            .datasets
            .get(&dataset_id)
            .ok_or(Error::UnknownDataset(dataset_id))?;
        Ok(entry.top_k * self.moe_layers().count())
    }

    pub fn visit_params<'a>(&'a self, f: &mut dyn FnMut(String, &'a Param)) {
        f("embed.w".into(), &self.embed.w);
        f("embed.b".into(), &self.embed.b);
        for (i, block) in self.blocks.iter().enumerate() {
            f(format!("block{i}.dense.w"), &block.dense.w);
            f(format!("block{i}.dense.b"), &block.dense.b);
            if let Some(layer) = &block.moe {
                layer.visit_params(&format!("block{i}.moe"), f);
            }
        }
        for (ds, head) in &self.heads {
            f(format!("head{ds}.w"), &head.dense.w);
            f(format!("head{ds}.b"), &head.dense.b);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Param)) {
        f("embed.w".into(), &mut self.embed.w);
        f("embed.b".into(), &mut self.embed.b);
        for (i, block) in self.blocks.iter_mut().enumerate() {
            f(format!("block{i}.dense.w"), &mut block.dense.w);
            f(format!("block{i}.dense.b"), &mut block.dense.b);
            if let Some(layer) = &mut block.moe {
                layer.visit_params_mut(&format!("block{i}.moe"), f);
            }
        }
        for (ds, head) in &mut self.heads {
            f(format!("head{ds}.w"), &mut head.dense.w);
            f(format!("head{ds}.b"), &mut head.dense.b);
        }
    }

    /// Set the frozen flag on every parameter.
    pub fn set_all_frozen(&mut self, flag: bool) {
        self.visit_params_mut(&mut |_, p| p.frozen = flag);
    }

    /// Clear remembered tape handles on every parameter.
    pub fn clear_vars(&self) {
        self.visit_params(&mut |_, p| p.clear_var());
    }
}
