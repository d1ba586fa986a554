//! Reverse-mode gradient tape, rebuilt per forward pass (define-by-run).
//!
//! Values recorded on the tape are immutable once written. Nodes are stored
//! in append order, which is also a valid topological order: every parent
//! index is strictly smaller than its child. Backward walks the node list in
//! reverse and accumulates gradients additively.

use super::tensor::Tensor;
use crate::error::{Error, Result};
use std::rc::Rc;

/// Handle to a value recorded on a [`Tape`]. Only valid for the tape that
/// produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    pub(crate) id: usize,
}

/// Backward closure: receives the gradient flowing into this node and the
/// gradient buffers of all earlier nodes (parents live strictly before).
type BackFn = Box<dyn Fn(&[f64], &mut [Vec<f64>])>;

struct Node {
    shape: Vec<usize>,
    value: Rc<Vec<f64>>,
    backward: Option<BackFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Option<Vec<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, backward: Option<BackFn>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value: Rc::new(value),
            backward,
        });
        Var {
            id: self.nodes.len() - 1,
        }
    }

    /// Record a leaf value. Gradients accumulate into it and can be read back
    /// after `backward`, which makes leaves suitable for parameters.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), None)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.id].shape
    }

    pub fn value(&self, v: Var) -> Tensor {
        Tensor {
            shape: self.nodes[v.id].shape.clone(),
            data: self.nodes[v.id].value.as_ref().clone(),
        }
    }

    pub fn value_slice(&self, v: Var) -> &[f64] {
        &self.nodes[v.id].value
    }

    fn rc_value(&self, v: Var) -> Rc<Vec<f64>> {
        Rc::clone(&self.nodes[v.id].value)
    }

    /// Run reverse accumulation from a scalar loss. May be called once per
    /// tape; a second call is an error since gradients would double-count.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::Domain {
                op: "backward",
                msg: "backward already ran on this tape".into(),
            });
        }
        if self.nodes[loss.id].value.len() != 1 {
            return Err(Error::Domain {
                op: "backward",
                msg: format!("loss must be scalar, got shape {:?}", self.nodes[loss.id].shape),
            });
        }
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.value.len()])
            .collect();
        grads[loss.id][0] = 1.0;
        for id in (0..self.nodes.len()).rev() {
            if self.nodes[id].backward.is_none() {
                continue;
            }
            let (before, rest) = grads.split_at_mut(id);
            let gout = &rest[0];
            if gout.iter().all(|&g| g == 0.0) {
                continue;
            }
            (self.nodes[id].backward.as_ref().unwrap())(gout, before);
        }
        self.grads = Some(grads);
        Ok(())
    }

    /// Gradient of the loss with respect to `v` (same shape as `v`).
    pub fn grad(&self, v: Var) -> Tensor {
        let grads = self.grads.as_ref().expect("backward has not run");
        Tensor {
            shape: self.nodes[v.id].shape.clone(),
            data: grads[v.id].clone(),
        }
    }

    // ───────────────────────── ops ─────────────────────────

    /// Matrix product [m×k]·[k×n] → [m×n].
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::DimMismatch {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let av = self.rc_value(a);
        let bv = self.rc_value(b);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += x * brow[j];
                }
            }
        }
        let (ai, bi) = (a.id, b.id);
        let (av2, bv2) = (Rc::clone(&av), Rc::clone(&bv));
        Ok(self.push(
            vec![m, n],
            out,
            Some(Box::new(move |g, grads| {
                // dL/da = g·bᵀ ; dL/db = aᵀ·g
                {
                    let ga = &mut grads[ai];
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * bv2[p * n + j];
                            }
                            ga[i * k + p] += acc;
                        }
                    }
                }
                let gb = &mut grads[bi];
                for p in 0..k {
                    for i in 0..m {
                        let x = av2[i * k + p];
                        if x == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            gb[p * n + j] += x * g[i * n + j];
                        }
                    }
                }
            })),
        ))
    }

    /// Elementwise sum of two same-shape values.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(Error::DimMismatch {
                op: "add",
                left: sa,
                right: sb,
            });
        }
        let av = self.rc_value(a);
        let bv = self.rc_value(b);
        let out = av.iter().zip(bv.iter()).map(|(x, y)| x + y).collect();
        let (ai, bi) = (a.id, b.id);
        Ok(self.push(
            sa,
            out,
            Some(Box::new(move |g, grads| {
                for (gi, &gv) in g.iter().enumerate() {
                    grads[ai][gi] += gv;
                }
                for (gi, &gv) in g.iter().enumerate() {
                    grads[bi][gi] += gv;
                }
            })),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// Row-broadcast add: [m×n] + [n].
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::DimMismatch {
                op: "add_bias",
                left: sx,
                right: sb,
            });
        }
        let (m, n) = (sx[0], sx[1]);
        let xv = self.rc_value(x);
        let bv = self.rc_value(bias);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = xv[i * n + j] + bv[j];
            }
        }
        let (xi, bi) = (x.id, bias.id);
        Ok(self.push(
            sx,
            out,
            Some(Box::new(move |g, grads| {
                for (gi, &gv) in g.iter().enumerate() {
                    grads[xi][gi] += gv;
                }
                for i in 0..m {
                    for j in 0..n {
                        grads[bi][j] += g[i * n + j];
                    }
                }
            })),
        ))
    }

    /// Elementwise product of two same-shape values.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(Error::DimMismatch {
                op: "mul",
                left: sa,
                right: sb,
            });
        }
        let av = self.rc_value(a);
        let bv = self.rc_value(b);
        let out = av.iter().zip(bv.iter()).map(|(x, y)| x * y).collect();
        let (ai, bi) = (a.id, b.id);
        let (av2, bv2) = (av, bv);
        Ok(self.push(
            sa,
            out,
            Some(Box::new(move |g, grads| {
                for (gi, &gv) in g.iter().enumerate() {
                    grads[ai][gi] += gv * bv2[gi];
                }
                for (gi, &gv) in g.iter().enumerate() {
                    grads[bi][gi] += gv * av2[gi];
                }
            })),
        ))
    }

    /// Multiply by a constant scalar.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let xv = self.rc_value(x);
        let out = xv.iter().map(|v| v * c).collect();
        let xi = x.id;
        let shape = self.shape(x).to_vec();
        self.push(
            shape,
            out,
            Some(Box::new(move |g, grads| {
                for (gi, &gv) in g.iter().enumerate() {
                    grads[xi][gi] += gv * c;
                }
            })),
        )
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let xv = self.rc_value(x);
        let out: Vec<f64> = xv.iter().map(|v| v.tanh()).collect();
        let yv = Rc::new(out.clone());
        let xi = x.id;
        let shape = self.shape(x).to_vec();
        self.push(
            shape,
            out,
            Some(Box::new(move |g, grads| {
                for (gi, &gv) in g.iter().enumerate() {
                    grads[xi][gi] += gv * (1.0 - yv[gi] * yv[gi]);
                }
            })),
        )
    }

    /// Natural log; every element must be strictly positive.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        let xv = self.rc_value(x);
        if let Some(bad) = xv.iter().find(|&&v| v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                msg: format!("log of non-positive value {bad}"),
            });
        }
        let out = xv.iter().map(|v| v.ln()).collect();
        let xi = x.id;
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            out,
            Some(Box::new(move |g, grads| {
                for (gi, &gv) in g.iter().enumerate() {
                    grads[xi][gi] += gv / xv[gi];
                }
            })),
        ))
    }

    /// Sum of all elements → scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let xv = self.rc_value(x);
        let s: f64 = xv.iter().sum();
        let xi = x.id;
        let n = xv.len();
        self.push(
            vec![1],
            vec![s],
            Some(Box::new(move |g, grads| {
                for gi in 0..n {
                    grads[xi][gi] += g[0];
                }
            })),
        )
    }

    /// Mean of all elements → scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.nodes[x.id].value.len();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Column sums of a matrix: [m×n] → [n].
    pub fn sum_axis0(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(Error::DimMismatch {
                op: "sum_axis0",
                left: sx,
                right: vec![],
            });
        }
        let (m, n) = (sx[0], sx[1]);
        let xv = self.rc_value(x);
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += xv[i * n + j];
            }
        }
        let xi = x.id;
        Ok(self.push(
            vec![n],
            out,
            Some(Box::new(move |g, grads| {
                for i in 0..m {
                    for j in 0..n {
                        grads[xi][i * n + j] += g[j];
                    }
                }
            })),
        ))
    }

    /// Column means of a matrix: [m×n] → [n].
    pub fn mean_axis0(&mut self, x: Var) -> Result<Var> {
        let m = self.shape(x)[0];
        let s = self.sum_axis0(x)?;
        Ok(self.scale(s, 1.0 / m as f64))
    }

    /// Softmax along the last axis, stabilized by max-subtraction.
    /// Accepts a vector (one row) or a matrix (per-row softmax).
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let n = *sx.last().unwrap();
        let xv = self.rc_value(x);
        if xv.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                op: "softmax",
                msg: "non-finite input".into(),
            });
        }
        let rows = xv.len() / n;
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                out[r * n + j] = e;
                z += e;
            }
            for j in 0..n {
                out[r * n + j] /= z;
            }
        }
        let yv = Rc::new(out.clone());
        let xi = x.id;
        Ok(self.push(
            sx,
            out,
            Some(Box::new(move |g, grads| {
                for r in 0..rows {
                    let y = &yv[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: f64 = (0..n).map(|j| gr[j] * y[j]).sum();
                    for j in 0..n {
                        grads[xi][r * n + j] += y[j] * (gr[j] - dot);
                    }
                }
            })),
        ))
    }

    /// Mean cross-entropy of logits [b×c] against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let sx = self.shape(logits).to_vec();
        let (b, c) = if sx.len() == 2 { (sx[0], sx[1]) } else { (1, sx[0]) };
        if labels.len() != b {
            return Err(Error::DimMismatch {
                op: "cross_entropy",
                left: sx,
                right: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Data(format!("label {bad} out of range for {c} classes")));
        }
        let xv = self.rc_value(logits);
        let mut probs = vec![0.0; xv.len()];
        let mut total = 0.0;
        for r in 0..b {
            let row = &xv[r * c..(r + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                let e = (row[j] - mx).exp();
                probs[r * c + j] = e;
                z += e;
            }
            for j in 0..c {
                probs[r * c + j] /= z;
            }
            total += z.ln() + mx - row[labels[r]];
        }
        let loss = total / b as f64;
        let xi = logits.id;
        let labels = labels.to_vec();
        let probs = Rc::new(probs);
        Ok(self.push(
            vec![1],
            vec![loss],
            Some(Box::new(move |g, grads| {
                let scale = g[0] / b as f64;
                for r in 0..b {
                    for j in 0..c {
                        let onehot = if labels[r] == j { 1.0 } else { 0.0 };
                        grads[xi][r * c + j] += scale * (probs[r * c + j] - onehot);
                    }
                }
            })),
        ))
    }

    /// Mean squared error between two same-shape values → scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Euclidean norm of all elements → scalar.
    pub fn l2_norm(&mut self, x: Var) -> Var {
        let xv = self.rc_value(x);
        let norm = xv.iter().map(|v| v * v).sum::<f64>().sqrt();
        let xi = x.id;
        self.push(
            vec![1],
            vec![norm],
            Some(Box::new(move |g, grads| {
                if norm > 0.0 {
                    for (gi, &v) in xv.iter().enumerate() {
                        grads[xi][gi] += g[0] * v / norm;
                    }
                }
            })),
        )
    }

    /// Gather whole rows of a matrix: rows `idx` of [m×n] → [len(idx)×n].
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(Error::DimMismatch {
                op: "gather_rows",
                left: sx,
                right: vec![],
            });
        }
        let (m, n) = (sx[0], sx[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::Domain {
                op: "gather_rows",
                msg: format!("row {bad} out of range {m}"),
            });
        }
        let xv = self.rc_value(x);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&xv[i * n..(i + 1) * n]);
        }
        let xi = x.id;
        let idx = idx.to_vec();
        Ok(self.push(
            vec![idx.len(), n],
            out,
            Some(Box::new(move |g, grads| {
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..n {
                        grads[xi][i * n + j] += g[r * n + j];
                    }
                }
            })),
        ))
    }

    /// Scatter rows of [s×n] into a zero matrix [m×n] at row positions `idx`
    /// (accumulating on duplicates). Inverse of `gather_rows`.
    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], m: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || sx[0] != idx.len() {
            return Err(Error::DimMismatch {
                op: "scatter_rows",
                left: sx,
                right: vec![idx.len()],
            });
        }
        let n = sx[1];
        let xv = self.rc_value(x);
        let mut out = vec![0.0; m * n];
        for (r, &i) in idx.iter().enumerate() {
            for j in 0..n {
                out[i * n + j] += xv[r * n + j];
            }
        }
        let xi = x.id;
        let idx = idx.to_vec();
        Ok(self.push(
            vec![m, n],
            out,
            Some(Box::new(move |g, grads| {
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..n {
                        grads[xi][r * n + j] += g[i * n + j];
                    }
                }
            })),
        ))
    }

    /// Scale row r of [s×n] by w[r], where w is a vector var of length s.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 1 || sw[0] != sx[0] {
            return Err(Error::DimMismatch {
                op: "scale_rows",
                left: sx,
                right: sw,
            });
        }
        let (s, n) = (sx[0], sx[1]);
        let xv = self.rc_value(x);
        let wv = self.rc_value(w);
        let mut out = vec![0.0; s * n];
        for r in 0..s {
            for j in 0..n {
                out[r * n + j] = xv[r * n + j] * wv[r];
            }
        }
        let (xi, wi) = (x.id, w.id);
        Ok(self.push(
            sx,
            out,
            Some(Box::new(move |g, grads| {
                for r in 0..s {
                    let mut acc = 0.0;
                    for j in 0..n {
                        grads[xi][r * n + j] += g[r * n + j] * wv[r];
                        acc += g[r * n + j] * xv[r * n + j];
                    }
                    grads[wi][r] += acc;
                }
            })),
        ))
    }

    /// Gather flat elements → vector of length len(idx).
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.rc_value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.len()) {
            return Err(Error::Domain {
                op: "gather",
                msg: format!("index {bad} out of range {}", xv.len()),
            });
        }
        let out = idx.iter().map(|&i| xv[i]).collect();
        let xi = x.id;
        let idx = idx.to_vec();
        Ok(self.push(
            vec![idx.len()],
            out,
            Some(Box::new(move |g, grads| {
                for (r, &i) in idx.iter().enumerate() {
                    grads[xi][i] += g[r];
                }
            })),
        ))
    }

    /// Renormalize selected entries of each probability row: for sample r with
    /// selected column set S_r (k columns), w[r][j] = p[r][S_rj] / Σ_{t∈S_r} p[r][t].
    /// Gradients flow only through the selected entries; the selection itself
    /// is treated as non-differentiable.
    pub fn select_renorm(&mut self, probs: Var, selected: &[Vec<usize>]) -> Result<Var> {
        let sx = self.shape(probs).to_vec();
        if sx.len() != 2 || sx[0] != selected.len() {
            return Err(Error::DimMismatch {
                op: "select_renorm",
                left: sx,
                right: vec![selected.len()],
            });
        }
        let (b, n) = (sx[0], sx[1]);
        let k = selected.first().map_or(0, |s| s.len());
        if selected.iter().any(|s| s.len() != k) || k == 0 {
            return Err(Error::Domain {
                op: "select_renorm",
                msg: "selection sets must be nonempty and of equal size".into(),
            });
        }
        let pv = self.rc_value(probs);
        let mut out = vec![0.0; b * k];
        let mut sums = vec![0.0; b];
        for r in 0..b {
            let s: f64 = selected[r].iter().map(|&j| pv[r * n + j]).sum();
            sums[r] = s;
            for (slot, &j) in selected[r].iter().enumerate() {
                out[r * k + slot] = pv[r * n + j] / s;
            }
        }
        let pi = probs.id;
        let selected = selected.to_vec();
        Ok(self.push(
            vec![b, k],
            out,
            Some(Box::new(move |g, grads| {
                for r in 0..b {
                    let s = sums[r];
                    // d w_slot / d p_u = δ/s − p_slot/s²  for u,slot ∈ S_r
                    let mut weighted: f64 = 0.0;
                    for (slot, &j) in selected[r].iter().enumerate() {
                        weighted += g[r * k + slot] * pv[r * n + j];
                    }
                    for (slot, &j) in selected[r].iter().enumerate() {
                        grads[pi][r * n + j] += g[r * k + slot] / s - weighted / (s * s);
                    }
                }
            })),
        ))
    }

    /// Reinterpret the flat data under a new shape of equal element count.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        let xv = self.rc_value(x);
        if numel != xv.len() {
            return Err(Error::DimMismatch {
                op: "reshape",
                left: self.shape(x).to_vec(),
                right: shape.to_vec(),
            });
        }
        let out = xv.as_ref().clone();
        let xi = x.id;
        Ok(self.push(
            shape.to_vec(),
            out,
            Some(Box::new(move |g, grads| {
                for (gi, &gv) in g.iter().enumerate() {
                    grads[xi][gi] += gv;
                }
            })),
        ))
    }

    /// Dot product with a constant coefficient vector → scalar.
    pub fn dot_const(&mut self, x: Var, coeffs: &[f64]) -> Result<Var> {
        let xv = self.rc_value(x);
        if xv.len() != coeffs.len() {
            return Err(Error::DimMismatch {
                op: "dot_const",
                left: self.shape(x).to_vec(),
                right: vec![coeffs.len()],
            });
        }
        let s: f64 = xv.iter().zip(coeffs).map(|(a, b)| a * b).sum();
        let xi = x.id;
        let coeffs = coeffs.to_vec();
        Ok(self.push(
            vec![1],
            vec![s],
            Some(Box::new(move |g, grads| {
                for (gi, &c) in coeffs.iter().enumerate() {
                    grads[xi][gi] += g[0] * c;
                }
            })),
        ))
    }
}
