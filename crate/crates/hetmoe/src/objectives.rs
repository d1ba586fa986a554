//! Task losses, the exact dataset-expert mutual-information loss, the
//! buffered surrogate loss, and the momentum-tracked joint-usage buffer.

use crate::error::{Error, Result};
use crate::moe::GateDecision;
use crate::ndgrad::{Tape, Var};
use crate::synthdata::Targets;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Numerical floor applied to buffer entries before taking logs; guards
/// experts a dataset never uses.
pub const BUFFER_FLOOR: f64 = 1e-8;

pub const DEFAULT_MOMENTUM: f64 = 0.98;

/// Running estimate of the joint dataset-expert usage distribution B(D,E).
/// Rows are keyed by dataset id and initialize lazily to the first batch
/// estimate; columns follow the owning layer's expert list positionally.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JointBuffer {
    rows: BTreeMap<u32, Vec<f64>>,
    pub momentum: f64,
    n_experts: usize,
}

impl JointBuffer {
    pub fn new(n_experts: usize) -> Self {
        JointBuffer {
            rows: BTreeMap::new(),
            momentum: DEFAULT_MOMENTUM,
            n_experts,
        }
    }

    pub fn n_experts(&self) -> usize {
        self.n_experts
    }

    pub fn is_initialized(&self, dataset_id: u32) -> bool {
        self.rows.contains_key(&dataset_id)
    }

    pub fn row(&self, dataset_id: u32) -> Option<&[f64]> {
        self.rows.get(&dataset_id).map(|r| r.as_slice())
    }

    pub fn dataset_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.rows.keys().copied()
    }

    /// Column sums Σ_i B(D_i, E_j) over all initialized rows.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.n_experts];
        for row in self.rows.values() {
            for (j, v) in row.iter().enumerate() {
                sums[j] += v;
            }
        }
        sums
    }

    /// Momentum update of the sampled dataset's row with a full-width joint
    /// estimate. The first update for a dataset initializes its row to the
    /// estimate directly.
    pub fn update(&mut self, dataset_id: u32, estimate: &[f64]) {
        assert_eq!(estimate.len(), self.n_experts);
        let floored: Vec<f64> = estimate.iter().map(|&v| v.max(BUFFER_FLOOR)).collect();
        match self.rows.get_mut(&dataset_id) {
            Some(row) => {
                let m = self.momentum;
                for (b, &p) in row.iter_mut().zip(&floored) {
                    *b = m * *b + (1.0 - m) * p;
                }
            }
            None => {
                self.rows.insert(dataset_id, floored);
            }
        }
    }

    /// Grow the expert dimension by one column (new expert appended to the
    /// layer). Existing rows get the floor value: old datasets cannot route
    /// to the new expert.
    pub fn push_expert_column(&mut self) {
        self.n_experts += 1;
        for row in self.rows.values_mut() {
            row.push(BUFFER_FLOOR);
        }
    }

    /// Drop columns at the given expert positions (ascending).
    pub fn drop_columns(&mut self, positions: &[usize]) {
        self.n_experts -= positions.len();
        for row in self.rows.values_mut() {
            let mut keep = Vec::with_capacity(self.n_experts);
            let mut drop_iter = positions.iter().peekable();
            for (j, v) in row.iter().enumerate() {
                if drop_iter.peek() == Some(&&j) {
                    drop_iter.next();
                } else {
                    keep.push(*v);
                }
            }
            *row = keep;
        }
    }
}

/// Per-batch joint-usage estimate for the sampled dataset, carrying
/// gradients back to the router through the full pre-Top-K softmax.
pub struct UsageSnapshot {
    pub dataset_id: u32,
    pub n_datasets: usize,
    /// P(D_i, E_j) for the sampled row, tape-tracked; length = router width.
    pub p_joint: Var,
    pub p_joint_value: Vec<f64>,
    /// Layer buffer column for each entry of `p_joint`.
    pub cols: Vec<usize>,
}

/// Batch estimate of P(E|D_i) from the full softmax probabilities, divided
/// by the number of datasets to obtain the joint row P(D_i, ·). Rows for
/// datasets not sampled in this pass are implicitly zero.
pub fn batch_usage(
    tape: &mut Tape,
    decision: &GateDecision,
    dataset_id: u32,
    n_datasets: usize,
    cols: Vec<usize>,
) -> Result<UsageSnapshot> {
    let p_cond = tape.mean_axis0(decision.probs)?;
    let p_joint = tape.scale(p_cond, 1.0 / n_datasets as f64);
    let p_joint_value = tape.value(p_joint).data;
    if cols.len() != p_joint_value.len() {
        return Err(Error::DimMismatch {
            op: "batch_usage",
            left: vec![cols.len()],
            right: vec![p_joint_value.len()],
        });
    }
    Ok(UsageSnapshot {
        dataset_id,
        n_datasets,
        p_joint,
        p_joint_value,
        cols,
    })
}

/// Exact mutual-information loss on a fully populated joint distribution:
/// H(D,E) − H(D) − H(E) = −I(D;E), with 0·log 0 ≡ 0. Analysis/test path.
pub fn mi_loss_exact(p_joint: &[Vec<f64>]) -> Result<f64> {
    let m = p_joint.len();
    let n = p_joint.first().map_or(0, |r| r.len());
    if m == 0 || n == 0 {
        return Err(Error::Domain {
            op: "mi_loss_exact",
            msg: "empty joint distribution".into(),
        });
    }
    let xlogx = |p: f64| if p > 0.0 { p * p.ln() } else { 0.0 };
    let mut h_joint = 0.0;
    let mut p_d = vec![0.0; m];
    let mut p_e = vec![0.0; n];
    for (i, row) in p_joint.iter().enumerate() {
        for (j, &p) in row.iter().enumerate() {
            if p < 0.0 {
                return Err(Error::Domain {
                    op: "mi_loss_exact",
                    msg: format!("negative probability {p}"),
                });
            }
            h_joint -= xlogx(p);
            p_d[i] += p;
            p_e[j] += p;
        }
    }
    let h_d: f64 = -p_d.iter().map(|&p| xlogx(p)).sum::<f64>();
    let h_e: f64 = -p_e.iter().map(|&p| xlogx(p)).sum::<f64>();
    Ok(h_joint - h_d - h_e)
}

/// Buffered surrogate MI loss for the sampled dataset (tape-tracked).
///
/// L = −Σ_j (1+log B_ij)·P_ij + Σ_j (1+log Σ_i B_ij)·P_j with the buffer
/// treated as a constant; since only the sampled row is nonzero this
/// collapses to Σ_j (log ΣB_j − log B_ij)·P_ij. The constant P(D) entropy
/// term is omitted.
pub fn mi_loss_surrogate(
    tape: &mut Tape,
    snapshot: &UsageSnapshot,
    buffer: &JointBuffer,
) -> Result<Var> {
    let row = buffer.row(snapshot.dataset_id).ok_or_else(|| Error::Domain {
        op: "mi_loss_surrogate",
        msg: format!(
            "buffer row for dataset {} not initialized",
            snapshot.dataset_id
        ),
    })?;
    if let Some(&bad) = row.iter().find(|&&b| b <= 0.0) {
        return Err(Error::Domain {
            op: "mi_loss_surrogate",
            msg: format!("non-positive buffer entry {bad}"),
        });
    }
    let col_sums = buffer.column_sums();
    let coeffs: Vec<f64> = snapshot
        .cols
        .iter()
        .map(|&c| {
            let b = row[c].max(BUFFER_FLOOR);
            let s = col_sums[c].max(BUFFER_FLOOR);
            s.ln() - b.ln()
        })
        .collect();
    tape.dot_const(snapshot.p_joint, &coeffs)
}

/// Plain-value surrogate on a fully populated joint matrix; used by tests
/// to compare gradients against the exact loss by finite differences.
pub fn mi_loss_surrogate_dense(p_joint: &[Vec<f64>], buffer: &[Vec<f64>]) -> f64 {
    let n = p_joint[0].len();
    let mut col_sums = vec![0.0; n];
    for row in buffer {
        for (j, &b) in row.iter().enumerate() {
            col_sums[j] += b;
        }
    }
    let mut loss = 0.0;
    for (prow, brow) in p_joint.iter().zip(buffer) {
        for j in 0..n {
            loss -= (1.0 + brow[j].max(BUFFER_FLOOR).ln()) * prow[j];
        }
    }
    let p_e: Vec<f64> = (0..n)
        .map(|j| p_joint.iter().map(|r| r[j]).sum::<f64>())
        .collect();
    for j in 0..n {
        loss += (1.0 + col_sums[j].max(BUFFER_FLOOR).ln()) * p_e[j];
    }
    loss
}

/// Momentum update of the buffer from a batch snapshot. Must run after the
/// surrogate loss is computed: the loss sees the pre-update buffer.
pub fn buffer_update(buffer: &mut JointBuffer, snapshot: &UsageSnapshot) {
    let mut full = vec![0.0; buffer.n_experts()];
    for (&c, &p) in snapshot.cols.iter().zip(&snapshot.p_joint_value) {
        full[c] = p;
    }
    buffer.update(snapshot.dataset_id, &full);
}

/// Scalar task loss dispatched on the target kind: cross-entropy over logits
/// for classification, mean squared error for regression.
pub fn task_loss(tape: &mut Tape, output: Var, targets: &Targets) -> Result<Var> {
    match targets {
        Targets::Labels(labels) => tape.cross_entropy(output, labels),
        Targets::Values(t) => {
            let tv = tape.leaf(t);
            tape.mse(output, tv)
        }
    }
}
