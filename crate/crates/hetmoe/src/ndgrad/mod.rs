//! Dense tensors with reverse-mode automatic differentiation.

pub mod check;
mod tensor;
mod tape;

pub use tape::{Tape, Var};
pub use tensor::Tensor;

use serde::{Deserialize, Serialize};
use std::cell::Cell;

/// A trainable parameter: a plain tensor that outlives the per-step tape.
/// During a forward pass the owner watches it onto the tape; `last_var`
/// remembers the handle so the optimizer can read back the gradient.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Param {
    pub value: Tensor,
    pub frozen: bool,
    #[serde(skip)]
    last_var: Cell<Option<Var>>,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        Param {
            value,
            frozen: false,
            last_var: Cell::new(None),
        }
    }

    /// Record the parameter on the tape and remember its handle.
    pub fn watch(&self, tape: &mut Tape) -> Var {
        let v = tape.leaf(&self.value);
        self.last_var.set(Some(v));
        v
    }

    pub fn last_var(&self) -> Option<Var> {
        self.last_var.get()
    }

    pub fn clear_var(&self) {
        self.last_var.set(None);
    }
}

/// Scale all gradients by max_norm/g when their global L2 norm g exceeds
/// max_norm. Returns the pre-clip global norm.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    assert!(max_norm > 0.0);
    let sq: f64 = grads
        .iter()
        .map(|t| t.data.iter().map(|v| v * v).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let factor = max_norm / norm;
        for t in grads.iter_mut() {
            for v in t.data.iter_mut() {
                *v *= factor;
            }
        }
    }
    norm
}
