//! Experts, dataset-specific routers, Top-K gating and the MoE layer
//! forward pass, plus structural mutation of the expert pool (add, remove,
//! freeze).

use crate::error::{Error, Result};
use crate::ndgrad::{Param, Tape, Tensor, Var};
use crate::objectives::JointBuffer;
use crate::rng::Rng;
use serde::{Deserialize, Serialize};
use std::cell::Cell;
use std::collections::{BTreeMap, BTreeSet};

/// Two-layer MLP expert (d → h → d, tanh hidden, no output bias so that
/// FLOPs-matched pools have exactly h-proportional parameter counts).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Expert {
    pub id: u32,
    pub w1: Param,
    pub b1: Param,
    pub w2: Param,
    /// Number of forward evaluations; used to assert that non-selected
    /// experts are never computed.
    #[serde(skip)]
    pub eval_count: Cell<u64>,
}

impl Expert {
    pub fn new(id: u32, d: usize, h: usize, rng: &mut Rng) -> Self {
        Expert {
            id,
            w1: Param::new(Tensor::init_uniform(&[d, h], d, rng)),
            b1: Param::new(Tensor::init_uniform(&[h], d, rng)),
            w2: Param::new(Tensor::init_uniform(&[h, d], h, rng)),
            eval_count: Cell::new(0),
        }
    }

    pub fn hidden_width(&self) -> usize {
        self.w1.value.shape[1]
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.eval_count.set(self.eval_count.get() + 1);
        let w1 = self.w1.watch(tape);
        let b1 = self.b1.watch(tape);
        let w2 = self.w2.watch(tape);
        let h = tape.matmul(x, w1)?;
        let h = tape.add_bias(h, b1)?;
        let h = tape.tanh(h);
        tape.matmul(h, w2)
    }

    pub fn set_frozen(&mut self, flag: bool) {
        self.w1.frozen = flag;
        self.b1.frozen = flag;
        self.w2.frozen = flag;
    }

    pub fn frozen(&self) -> bool {
        self.w1.frozen && self.b1.frozen && self.w2.frozen
    }

    pub fn param_count(&self) -> usize {
        self.w1.value.numel() + self.b1.value.numel() + self.w2.value.numel()
    }
}

/// Per-dataset linear gating network. A router only ever addresses the
/// experts that existed when it was created: `expert_ids` maps its logit
/// columns to stable expert ids and gains no entries on later expansions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Router {
    pub dataset_id: u32,
    pub w_g: Param,
    pub top_k: usize,
    pub expert_ids: Vec<u32>,
}

impl Router {
    pub fn new(dataset_id: u32, d: usize, expert_ids: Vec<u32>, top_k: usize, rng: &mut Rng) -> Result<Self> {
        if top_k == 0 || top_k > expert_ids.len() {
            return Err(Error::Structural(format!(
                "top_k {top_k} out of range for {} experts",
                expert_ids.len()
            )));
        }
        Ok(Router {
            dataset_id,
            w_g: Param::new(Tensor::init_uniform(&[d, expert_ids.len()], d, rng)),
            top_k,
            expert_ids,
        })
    }

    pub fn n_experts_at_creation(&self) -> usize {
        self.expert_ids.len()
    }
}

/// Per-sample routing result: full softmax probabilities (pre-Top-K),
/// selected expert columns/ids, and renormalized gate weights.
pub struct GateDecision {
    /// Full softmax over the router's addressable experts, [batch × n].
    pub probs: Var,
    pub probs_value: Tensor,
    /// Per sample: selected column indices into the router's expert list.
    pub selected_cols: Vec<Vec<usize>>,
    /// Per sample: selected stable expert ids.
    pub selected_ids: Vec<Vec<u32>>,
    /// Renormalized gate weights over the selected set, [batch × top_k].
    pub weights: Var,
    /// Column → stable expert id map of the producing router.
    pub expert_ids: Vec<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MoELayer {
    pub layer_id: u32,
    pub experts: Vec<Expert>,
    pub routers: BTreeMap<u32, Router>,
    pub buffer: JointBuffer,
    pub d: usize,
    /// Hidden width given to newly added experts.
    pub expert_hidden: usize,
    next_expert_id: u32,
}

impl MoELayer {
    pub fn new(layer_id: u32, d: usize, expert_hidden: usize, n_experts: usize, rng: &mut Rng) -> Self {
        let experts: Vec<Expert> = (0..n_experts)
            .map(|i| Expert::new(i as u32, d, expert_hidden, rng))
            .collect();
        MoELayer {
            layer_id,
            experts,
            routers: BTreeMap::new(),
            buffer: JointBuffer::new(n_experts),
            d,
            expert_hidden,
            next_expert_id: n_experts as u32,
        }
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn expert_position(&self, id: u32) -> Option<usize> {
        self.experts.iter().position(|e| e.id == id)
    }

    /// Create and register a router for a dataset over the current pool.
    pub fn add_router(&mut self, dataset_id: u32, top_k: usize, rng: &mut Rng) -> Result<()> {
        if self.routers.contains_key(&dataset_id) {
            return Err(Error::Structural(format!(
                "router for dataset {dataset_id} already exists in layer {}",
                self.layer_id
            )));
        }
        let ids = self.experts.iter().map(|e| e.id).collect();
        let router = Router::new(dataset_id, self.d, ids, top_k, rng)?;
        self.routers.insert(dataset_id, router);
        Ok(())
    }

    pub fn remove_router(&mut self, dataset_id: u32) -> Option<Router> {
        self.routers.remove(&dataset_id)
    }

    /// Map a router's logit columns to the layer's positional buffer columns.
    pub fn buffer_cols(&self, dataset_id: u32) -> Result<Vec<usize>> {
        let router = self
            .routers
            .get(&dataset_id)
            .ok_or(Error::UnknownDataset(dataset_id))?;
        router
            .expert_ids
            .iter()
            .map(|&id| {
                self.expert_position(id)
                    .ok_or_else(|| Error::Structural(format!("expert {id} missing from layer")))
            })
            .collect()
    }

    /// Top-K gating for one batch. Ties in selection break toward the lowest
    /// expert id so that runs are bit-reproducible.
    pub fn route(&self, tape: &mut Tape, x: Var, dataset_id: u32) -> Result<GateDecision> {
        let router = self
            .routers
            .get(&dataset_id)
            .ok_or(Error::UnknownDataset(dataset_id))?;
        let xs = tape.shape(x).to_vec();
        if xs.len() != 2 || xs[1] != self.d {
            return Err(Error::DimMismatch {
                op: "route",
                left: xs,
                right: vec![self.d],
            });
        }
        let wg = router.w_g.watch(tape);
        let logits = tape.matmul(x, wg)?;
        // full softmax feeds the MI statistics only
        let probs = tape.softmax(logits)?;
        let probs_value = tape.value(probs);
        let n = router.expert_ids.len();
        let batch = xs[0];
        let k = router.top_k;

        let mut selected_cols = Vec::with_capacity(batch);
        let mut selected_ids = Vec::with_capacity(batch);
        for r in 0..batch {
            let row = &probs_value.data[r * n..(r + 1) * n];
            let mut cols: Vec<usize> = (0..n).collect();
            // expert_ids is ascending, so the column index is the id tiebreak
            cols.sort_by(|&a, &b| {
                row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b))
            });
            let mut top: Vec<usize> = cols[..k].to_vec();
            top.sort_unstable();
            selected_ids.push(top.iter().map(|&c| router.expert_ids[c]).collect());
            selected_cols.push(top);
        }
        // Gate weights come from a softmax over the selected logits only.
        // This equals the renormalized Top-K slice of the full softmax but is
        // bitwise independent of non-selected columns, which makes pruning of
        // never-selected experts exactly invariant. The true gradient of the
        // renormalized weights with respect to non-selected logits is zero,
        // so the restriction is also gradient-correct.
        let mut flat_idx = Vec::with_capacity(batch * k);
        for (r, cols) in selected_cols.iter().enumerate() {
            for &c in cols {
                flat_idx.push(r * n + c);
            }
        }
        let sel_logits = tape.gather(logits, &flat_idx)?;
        let sel_logits = tape.reshape(sel_logits, &[batch, k])?;
        let weights = tape.softmax(sel_logits)?;
        Ok(GateDecision {
            probs,
            probs_value,
            selected_cols,
            selected_ids,
            weights,
            expert_ids: router.expert_ids.clone(),
        })
    }

    /// MoE mixture: per sample, the renormalized-weighted sum of the selected
    /// experts' outputs. Only selected experts are evaluated.
    pub fn forward(&self, tape: &mut Tape, x: Var, dataset_id: u32) -> Result<(Var, GateDecision)> {
        let decision = self.route(tape, x, dataset_id)?;
        let batch = tape.shape(x)[0];
        let k = decision.selected_cols.first().map_or(0, |s| s.len());

        // group (sample, slot) pairs per selected expert
        let mut per_expert: BTreeMap<u32, Vec<(usize, usize)>> = BTreeMap::new();
        for (sample, ids) in decision.selected_ids.iter().enumerate() {
            for (slot, &id) in ids.iter().enumerate() {
                per_expert.entry(id).or_default().push((sample, slot));
            }
        }

        let mut acc = tape.leaf(&Tensor::zeros(&[batch, self.d]));
        for (id, pairs) in &per_expert {
            let pos = self
                .expert_position(*id)
                .ok_or_else(|| Error::Structural(format!("expert {id} missing from layer")))?;
            let samples: Vec<usize> = pairs.iter().map(|&(s, _)| s).collect();
            let weight_idx: Vec<usize> = pairs.iter().map(|&(s, slot)| s * k + slot).collect();
            let rows = tape.gather_rows(x, &samples)?;
            let out = self.experts[pos].forward(tape, rows)?;
            let w = tape.gather(decision.weights, &weight_idx)?;
            let scaled = tape.scale_rows(out, w)?;
            let contrib = tape.scatter_rows(scaled, &samples, batch)?;
            acc = tape.add(acc, contrib)?;
        }
        Ok((acc, decision))
    }

    /// Append `count` freshly initialized experts. Existing routers are left
    /// untouched and therefore can never select the new experts.
    pub fn add_experts(&mut self, count: usize, init_seed: u64) -> Vec<u32> {
        let mut new_ids = Vec::with_capacity(count);
        for _ in 0..count {
            let id = self.next_expert_id;
            self.next_expert_id += 1;
            let mut rng = Rng::stream(init_seed, (u64::from(self.layer_id) << 32) | u64::from(id));
            self.experts
                .push(Expert::new(id, self.d, self.expert_hidden, &mut rng));
            self.buffer.push_expert_column();
            new_ids.push(id);
        }
        new_ids
    }

    /// Delete experts by id, dropping the matching router logit columns and
    /// buffer columns.
    pub fn remove_experts(&mut self, ids: &BTreeSet<u32>) -> Result<()> {
        if ids.is_empty() {
            return Ok(());
        }
        for &id in ids {
            if self.expert_position(id).is_none() {
                return Err(Error::Structural(format!(
                    "cannot remove unknown expert {id} from layer {}",
                    self.layer_id
                )));
            }
        }
        for router in self.routers.values() {
            let surviving = router
                .expert_ids
                .iter()
                .filter(|id| !ids.contains(id))
                .count();
            if surviving < router.top_k {
                return Err(Error::Structural(format!(
                    "removing {} experts leaves router for dataset {} with {} experts < top_k {}",
                    ids.len(),
                    router.dataset_id,
                    surviving,
                    router.top_k
                )));
            }
        }
        // buffer columns are positional in the expert list
        let positions: Vec<usize> = self
            .experts
            .iter()
            .enumerate()
            .filter(|(_, e)| ids.contains(&e.id))
            .map(|(i, _)| i)
            .collect();
        self.buffer.drop_columns(&positions);
        self.experts.retain(|e| !ids.contains(&e.id));
        for router in self.routers.values_mut() {
            let keep: Vec<usize> = router
                .expert_ids
                .iter()
                .enumerate()
                .filter(|(_, id)| !ids.contains(id))
                .map(|(c, _)| c)
                .collect();
            if keep.len() != router.expert_ids.len() {
                let d = router.w_g.value.shape[0];
                let n = router.w_g.value.shape[1];
                let mut data = Vec::with_capacity(d * keep.len());
                for r in 0..d {
                    for &c in &keep {
                        data.push(router.w_g.value.data[r * n + c]);
                    }
                }
                let frozen = router.w_g.frozen;
                router.w_g = Param::new(Tensor::matrix(d, keep.len(), data)?);
                router.w_g.frozen = frozen;
                router.expert_ids = keep.iter().map(|&c| router.expert_ids[c]).collect();
            }
        }
        Ok(())
    }

    pub fn set_experts_frozen(&mut self, flag: bool) {
        for e in &mut self.experts {
            e.set_frozen(flag);
        }
    }

    pub fn set_expert_frozen(&mut self, id: u32, flag: bool) -> Result<()> {
        let pos = self
            .expert_position(id)
            .ok_or_else(|| Error::Structural(format!("unknown expert {id}")))?;
        self.experts[pos].set_frozen(flag);
        Ok(())
    }

    pub fn set_router_frozen(&mut self, dataset_id: u32, flag: bool) -> Result<()> {
        let router = self
            .routers
            .get_mut(&dataset_id)
            .ok_or_else(|| Error::Structural(format!("unknown router for dataset {dataset_id}")))?;
        router.w_g.frozen = flag;
        Ok(())
    }

    /// Visit every parameter of the layer with a stable path name.
    pub fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        for e in &self.experts {
            f(format!("{prefix}.expert{}.w1", e.id), &e.w1);
            f(format!("{prefix}.expert{}.b1", e.id), &e.b1);
            f(format!("{prefix}.expert{}.w2", e.id), &e.w2);
        }
        for (ds, r) in &self.routers {
            f(format!("{prefix}.router{ds}.w_g"), &r.w_g);
        }
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        for e in &mut self.experts {
            f(format!("{prefix}.expert{}.w1", e.id), &mut e.w1);
            f(format!("{prefix}.expert{}.b1", e.id), &mut e.b1);
            f(format!("{prefix}.expert{}.w2", e.id), &mut e.w2);
        }
        for (ds, r) in &mut self.routers {
            f(format!("{prefix}.router{ds}.w_g"), &mut r.w_g);
        }
    }
}
