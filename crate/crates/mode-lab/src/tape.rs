//! Reverse-mode automatic differentiation over dense float64 tensors.
//!
//! A `Tape` records primitive applications eagerly: every op computes its
//! value on insertion and stores what the adjoint rule needs. `backward`
//! then replays the record once in reverse topological (= insertion) order,
//! so every differentiable leaf receives its gradient exactly once per call.
//!
//! Leaves come in two kinds: constants (inputs, frozen weights) and slotted
//! leaves whose adjoints are written into a caller-owned [`GradBuf`]. Slots
//! decouple the tape from the parameter registry, which lets the training
//! loop inject precomputed per-step tensors (the low-rank expert products)
//! as leaves and map their gradients back to the underlying parameters
//! outside the tape.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{
    column_norms, ensure_finite, layer_norm_rows, matmul_nn, matmul_nt, matmul_tn, softmax_rows,
    Tensor,
};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Val(usize);

/// Gradient accumulator indexed by leaf slot.
#[derive(Debug, Clone)]
pub struct GradBuf {
    slots: Vec<Option<Vec<f64>>>,
}

impl GradBuf {
    pub fn new(n_slots: usize) -> Self {
        GradBuf { slots: vec![None; n_slots] }
    }

    pub fn n_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn get(&self, slot: usize) -> Option<&[f64]> {
        self.slots[slot].as_deref()
    }

    pub fn take(&mut self, slot: usize) -> Option<Vec<f64>> {
        self.slots[slot].take()
    }

    pub fn clear(&mut self) {
        for s in self.slots.iter_mut() {
            *s = None;
        }
    }

    pub fn add(&mut self, slot: usize, g: &[f64]) {
        match &mut self.slots[slot] {
            Some(buf) => {
                debug_assert_eq!(buf.len(), g.len());
                for (b, &v) in buf.iter_mut().zip(g) {
                    *b += v;
                }
            }
            none => *none = Some(g.to_vec()),
        }
    }

    /// Merge another accumulator into this one, slot by slot.
    pub fn merge(&mut self, other: &GradBuf) {
        debug_assert_eq!(self.slots.len(), other.slots.len());
        for (slot, g) in other.slots.iter().enumerate() {
            if let Some(g) = g {
                self.add(slot, g);
            }
        }
    }
}

enum NodeValue {
    Owned(Tensor),
    Shared(Arc<Tensor>),
}

impl NodeValue {
    fn tensor(&self) -> &Tensor {
        match self {
            NodeValue::Owned(t) => t,
            NodeValue::Shared(t) => t,
        }
    }
}

enum Op {
    Leaf { slot: Option<usize> },
    Add { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    Div { a: usize, b: usize },
    Relu { x: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, inv_std: Vec<f64>, xhat: Vec<f64> },
    MeanRows { x: usize },
    Softmax { x: usize, temperature: f64 },
    ColumnNorm { x: usize },
    ScaleCols { x: usize, s: usize },
    Broadcast11 { x: usize },
    MatmulNN { a: usize, b: usize },
    MatmulNT { a: usize, b: usize },
    SliceCols { x: usize, start: usize },
    ConcatCols { parts: Vec<usize> },
    Mix { w: usize, mats: Vec<usize> },
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<f64> },
    KlUniform { w: usize },
}

struct Node {
    value: NodeValue,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of primitive applications with the inputs each adjoint needs.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, v: Val) -> &Tensor {
        self.nodes[v.0].value.tensor()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Val {
        self.nodes.push(Node { value: NodeValue::Owned(value), op, needs_grad });
        Val(self.nodes.len() - 1)
    }

    fn needs(&self, v: Val) -> bool {
        self.nodes[v.0].needs_grad
    }

    // -- leaves ------------------------------------------------------------

    /// Constant leaf: receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Val {
        self.push(t, Op::Leaf { slot: None }, false)
    }

    /// Constant leaf sharing storage with the caller.
    pub fn constant_shared(&mut self, t: Arc<Tensor>) -> Val {
        self.nodes.push(Node {
            value: NodeValue::Shared(t),
            op: Op::Leaf { slot: None },
            needs_grad: false,
        });
        Val(self.nodes.len() - 1)
    }

    /// Differentiable leaf whose adjoint is accumulated into `slot`.
    pub fn leaf(&mut self, t: Tensor, slot: usize) -> Val {
        self.push(t, Op::Leaf { slot: Some(slot) }, true)
    }

    /// Differentiable leaf sharing storage with the caller.
    pub fn leaf_shared(&mut self, t: Arc<Tensor>, slot: usize) -> Val {
        self.nodes.push(Node {
            value: NodeValue::Shared(t),
            op: Op::Leaf { slot: Some(slot) },
            needs_grad: true,
        });
        Val(self.nodes.len() - 1)
    }

    /// Copy a node's value into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Val) -> Val {
        let t = self.value(v).clone();
        self.constant(t)
    }

    // -- primitives ---------------------------------------------------------

    pub fn add(&mut self, a: Val, b: Val) -> Result<Val> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(Error::shape("add", format!("{:?} vs {:?}", ta.shape, tb.shape)));
        }
        let data: Vec<f64> = ta.data.iter().zip(&tb.data).map(|(&x, &y)| x + y).collect();
        let out = Tensor { shape: ta.shape.clone(), data };
        ensure_finite("add", &out)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add { a: a.0, b: b.0 }, ng))
    }

    pub fn scale(&mut self, x: Val, c: f64) -> Result<Val> {
        let tx = self.value(x);
        let out = Tensor {
            shape: tx.shape.clone(),
            data: tx.data.iter().map(|&v| v * c).collect(),
        };
        ensure_finite("scale", &out)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Scale { x: x.0, c }, ng))
    }

    /// Elementwise division a / b (same shape).
    pub fn div(&mut self, a: Val, b: Val) -> Result<Val> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(Error::shape("div", format!("{:?} vs {:?}", ta.shape, tb.shape)));
        }
        let data: Vec<f64> = ta.data.iter().zip(&tb.data).map(|(&x, &y)| x / y).collect();
        let out = Tensor { shape: ta.shape.clone(), data };
        ensure_finite("div", &out)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Div { a: a.0, b: b.0 }, ng))
    }

    pub fn relu(&mut self, x: Val) -> Result<Val> {
        let tx = self.value(x);
        let out = Tensor {
            shape: tx.shape.clone(),
            data: tx.data.iter().map(|&v| v.max(0.0)).collect(),
        };
        let ng = self.needs(x);
        Ok(self.push(out, Op::Relu { x: x.0 }, ng))
    }

    /// Row-wise layer normalization with scale `gamma` and shift `beta` (1 x n).
    pub fn layer_norm(&mut self, x: Val, gamma: Val, beta: Val, eps: f64) -> Result<Val> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let n = tx.cols();
        if tg.shape != [1, n] || tb.shape != [1, n] {
            return Err(Error::shape(
                "layer_norm",
                format!("x {:?}, gamma {:?}, beta {:?}", tx.shape, tg.shape, tb.shape),
            ));
        }
        let (data, inv_std, xhat) = layer_norm_rows(&tx.data, n, &tg.data, &tb.data, eps);
        let out = Tensor { shape: tx.shape.clone(), data };
        ensure_finite("layer_norm", &out)?;
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            out,
            Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, inv_std, xhat },
            ng,
        ))
    }

    /// Mean over the row axis: m x n -> 1 x n.
    pub fn mean_rows(&mut self, x: Val) -> Result<Val> {
        let tx = self.value(x);
        let (m, n) = (tx.rows(), tx.cols());
        let mut data = vec![0.0; n];
        for row in tx.data.chunks_exact(n) {
            for (d, &v) in data.iter_mut().zip(row) {
                *d += v;
            }
        }
        for d in data.iter_mut() {
            *d /= m as f64;
        }
        let out = Tensor { shape: vec![1, n], data };
        ensure_finite("mean_rows", &out)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::MeanRows { x: x.0 }, ng))
    }

    /// Row-wise temperature-scaled softmax. Rows sum to 1; stabilized by
    /// max subtraction.
    pub fn softmax(&mut self, x: Val, temperature: f64) -> Result<Val> {
        if !(temperature > 0.0) {
            return Err(Error::domain("softmax", format!("temperature {} <= 0", temperature)));
        }
        let tx = self.value(x);
        let n = tx.cols();
        let mut data = vec![0.0; tx.len()];
        softmax_rows(&tx.data, n, temperature, &mut data);
        let out = Tensor { shape: tx.shape.clone(), data };
        ensure_finite("softmax", &out)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Softmax { x: x.0, temperature }, ng))
    }

    /// Per-column L2 norms: d_out x d_in -> 1 x d_in.
    pub fn column_norm(&mut self, x: Val) -> Result<Val> {
        let tx = self.value(x);
        if !tx.is_matrix() {
            return Err(Error::shape("column_norm", format!("expected matrix, got {:?}", tx.shape)));
        }
        let norms = column_norms(&tx.data, tx.rows(), tx.cols());
        let out = Tensor { shape: vec![1, tx.cols()], data: norms };
        ensure_finite("column_norm", &out)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::ColumnNorm { x: x.0 }, ng))
    }

    /// Scale each column j of x by s[0, j].
    pub fn scale_cols(&mut self, x: Val, s: Val) -> Result<Val> {
        let (tx, ts) = (self.value(x), self.value(s));
        let n = tx.cols();
        if ts.shape != [1, n] {
            return Err(Error::shape(
                "scale_cols",
                format!("x {:?}, scale {:?}", tx.shape, ts.shape),
            ));
        }
        let mut data = Vec::with_capacity(tx.len());
        for row in tx.data.chunks_exact(n) {
            for (j, &v) in row.iter().enumerate() {
                data.push(v * ts.data[j]);
            }
        }
        let out = Tensor { shape: tx.shape.clone(), data };
        ensure_finite("scale_cols", &out)?;
        let ng = self.needs(x) || self.needs(s);
        Ok(self.push(out, Op::ScaleCols { x: x.0, s: s.0 }, ng))
    }

    /// Broadcast a 1x1 tensor to 1 x n.
    pub fn broadcast_scalar(&mut self, x: Val, n: usize) -> Result<Val> {
        let tx = self.value(x);
        if tx.shape != [1, 1] {
            return Err(Error::shape("broadcast_scalar", format!("expected 1x1, got {:?}", tx.shape)));
        }
        let out = Tensor { shape: vec![1, n], data: vec![tx.data[0]; n] };
        let ng = self.needs(x);
        Ok(self.push(out, Op::Broadcast11 { x: x.0 }, ng))
    }

    /// c = a * b with a: m x k, b: k x n.
    pub fn matmul(&mut self, a: Val, b: Val) -> Result<Val> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.is_matrix() || !tb.is_matrix() || ta.cols() != tb.rows() {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", ta.shape, tb.shape)));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let data = matmul_nn(&ta.data, &tb.data, m, k, n);
        let out = Tensor { shape: vec![m, n], data };
        ensure_finite("matmul", &out)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatmulNN { a: a.0, b: b.0 }, ng))
    }

    /// c = a * b^T with a: m x k, b: n x k.
    pub fn matmul_nt(&mut self, a: Val, b: Val) -> Result<Val> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.is_matrix() || !tb.is_matrix() || ta.cols() != tb.cols() {
            return Err(Error::shape("matmul_nt", format!("{:?} x {:?}^T", ta.shape, tb.shape)));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        let data = matmul_nt(&ta.data, &tb.data, m, k, n);
        let out = Tensor { shape: vec![m, n], data };
        ensure_finite("matmul_nt", &out)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatmulNT { a: a.0, b: b.0 }, ng))
    }

    /// Columns [start, start+len) of x.
    pub fn slice_cols(&mut self, x: Val, start: usize, len: usize) -> Result<Val> {
        let tx = self.value(x);
        let (m, n) = (tx.rows(), tx.cols());
        if start + len > n {
            return Err(Error::shape(
                "slice_cols",
                format!("slice {}..{} of {} cols", start, start + len, n),
            ));
        }
        let mut data = Vec::with_capacity(m * len);
        for row in tx.data.chunks_exact(n) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let out = Tensor { shape: vec![m, len], data };
        let ng = self.needs(x);
        Ok(self.push(out, Op::SliceCols { x: x.0, start }, ng))
    }

    /// Concatenate matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Val]) -> Result<Val> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no parts"));
        }
        let m = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != m) {
            return Err(Error::shape("concat_cols", "row count mismatch"));
        }
        let n: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let out = Tensor { shape: vec![m, n], data };
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::ConcatCols { parts: parts.iter().map(|p| p.0).collect() }, ng))
    }

    /// Convex-style mixture of same-shape matrices: out = sum_i w[0,i] * mats[i].
    /// The weights are an ordinary node, so gradients flow into both the
    /// weights and every matrix.
    pub fn mix(&mut self, w: Val, mats: &[Val]) -> Result<Val> {
        let tw = self.value(w);
        if tw.rows() != 1 || tw.cols() != mats.len() {
            return Err(Error::shape(
                "mix",
                format!("weights {:?} vs {} matrices", tw.shape, mats.len()),
            ));
        }
        if mats.is_empty() {
            return Err(Error::shape("mix", "no matrices"));
        }
        let shape = self.value(mats[0]).shape.clone();
        if mats.iter().any(|&m| self.value(m).shape != shape) {
            return Err(Error::shape("mix", "matrix shape mismatch"));
        }
        let mut data = vec![0.0; shape.iter().product()];
        for (i, &mv) in mats.iter().enumerate() {
            let wi = self.value(w).data[i];
            if wi == 0.0 {
                continue;
            }
            for (d, &v) in data.iter_mut().zip(&self.value(mv).data) {
                *d += wi * v;
            }
        }
        let out = Tensor { shape, data };
        ensure_finite("mix", &out)?;
        let ng = self.needs(w) || mats.iter().any(|&m| self.needs(m));
        Ok(self.push(out, Op::Mix { w: w.0, mats: mats.iter().map(|m| m.0).collect() }, ng))
    }

    /// Mean over the batch of -log softmax(logits)[label], in nats.
    pub fn cross_entropy(&mut self, logits: Val, labels: &[usize]) -> Result<Val> {
        let tl = self.value(logits);
        let (b, c) = (tl.rows(), tl.cols());
        if labels.len() != b {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} logit rows vs {} labels", b, labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::index("cross_entropy", format!("label {} out of range [0,{})", bad, c)));
        }
        let mut probs = vec![0.0; b * c];
        softmax_rows(&tl.data, c, 1.0, &mut probs);
        let mut loss = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            // log softmax computed directly from logits for stability
            let row = tl.row_slice(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln() + mx;
            loss -= row[label] - lse;
        }
        loss /= b as f64;
        let out = Tensor::scalar(loss);
        ensure_finite("cross_entropy", &out)?;
        let ng = self.needs(logits);
        Ok(self.push(out, Op::CrossEntropy { logits: logits.0, labels: labels.to_vec(), probs }, ng))
    }

    /// Mean over the batch of KL(w_row || uniform) = sum_i w_i ln(w_i E),
    /// with 0 ln 0 = 0. Rows must be distributions.
    pub fn kl_uniform(&mut self, w: Val) -> Result<Val> {
        let tw = self.value(w);
        let (b, e) = (tw.rows(), tw.cols());
        for i in 0..b {
            let row = tw.row_slice(i);
            if row.iter().any(|&v| v < 0.0) {
                return Err(Error::domain("kl_uniform", format!("negative entry in row {}", i)));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-8 {
                return Err(Error::domain("kl_uniform", format!("row {} sums to {}", i, s)));
            }
        }
        let ef = e as f64;
        let mut total = 0.0;
        for row in tw.data.chunks_exact(e) {
            for &v in row {
                if v > 0.0 {
                    total += v * (v * ef).ln();
                }
            }
        }
        total /= b as f64;
        let out = Tensor::scalar(total);
        ensure_finite("kl_uniform", &out)?;
        let ng = self.needs(w);
        Ok(self.push(out, Op::KlUniform { w: w.0 }, ng))
    }

    // -- backward ------------------------------------------------------------

    /// Backpropagate from a scalar node with seed weight `seed`, accumulating
    /// leaf adjoints into `grads`.
    pub fn backward(&self, from: Val, seed: f64, grads: &mut GradBuf) -> Result<()> {
        let t = self.value(from);
        if t.len() != 1 {
            return Err(Error::shape("backward", format!("seed node has shape {:?}", t.shape)));
        }
        self.backward_seeded(&[(from, vec![seed])], grads)
    }

    /// Backpropagate from explicitly seeded nodes. Each seed adjoint must
    /// match its node's element count. Seeding an interior node adds the
    /// given adjoint at that node before the reverse sweep reaches it.
    pub fn backward_seeded(&self, seeds: &[(Val, Vec<f64>)], grads: &mut GradBuf) -> Result<()> {
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut max_idx = 0;
        for (v, seed) in seeds {
            let t = self.value(*v);
            if t.len() != seed.len() {
                return Err(Error::shape(
                    "backward",
                    format!("seed len {} vs node len {}", seed.len(), t.len()),
                ));
            }
            add_adj(&mut adj, v.0, seed);
            max_idx = max_idx.max(v.0);
        }
        for idx in (0..=max_idx).rev() {
            if !self.nodes[idx].needs_grad {
                adj[idx] = None;
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            self.apply_adjoint(idx, &g, &mut adj, grads);
        }
        Ok(())
    }

    fn apply_adjoint(
        &self,
        idx: usize,
        g: &[f64],
        adj: &mut Vec<Option<Vec<f64>>>,
        grads: &mut GradBuf,
    ) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf { slot } => {
                if let Some(s) = *slot {
                    grads.add(s, g);
                }
            }
            Op::Add { a, b } => {
                if self.nodes[*a].needs_grad {
                    add_adj(adj, *a, g);
                }
                if self.nodes[*b].needs_grad {
                    add_adj(adj, *b, g);
                }
            }
            Op::Scale { x, c } => {
                if self.nodes[*x].needs_grad {
                    let gx: Vec<f64> = g.iter().map(|&v| v * c).collect();
                    set_adj(adj, *x, gx);
                }
            }
            Op::Div { a, b } => {
                let (ta, tb) = (self.nodes[*a].value.tensor(), self.nodes[*b].value.tensor());
                if self.nodes[*a].needs_grad {
                    let ga: Vec<f64> = g.iter().zip(&tb.data).map(|(&gv, &bv)| gv / bv).collect();
                    set_adj(adj, *a, ga);
                }
                if self.nodes[*b].needs_grad {
                    let gb: Vec<f64> = g
                        .iter()
                        .zip(ta.data.iter().zip(&tb.data))
                        .map(|(&gv, (&av, &bv))| -gv * av / (bv * bv))
                        .collect();
                    set_adj(adj, *b, gb);
                }
            }
            Op::Relu { x } => {
                if self.nodes[*x].needs_grad {
                    let tx = self.nodes[*x].value.tensor();
                    let gx: Vec<f64> = g
                        .iter()
                        .zip(&tx.data)
                        .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                        .collect();
                    set_adj(adj, *x, gx);
                }
            }
            Op::LayerNorm { x, gamma, beta, inv_std, xhat } => {
                let n = self.nodes[idx].value.tensor().cols();
                let tg = self.nodes[*gamma].value.tensor();
                if self.nodes[*gamma].needs_grad {
                    let mut gg = vec![0.0; n];
                    for (gr, hr) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for j in 0..n {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                    set_adj(adj, *gamma, gg);
                }
                if self.nodes[*beta].needs_grad {
                    let mut gb = vec![0.0; n];
                    for gr in g.chunks_exact(n) {
                        for j in 0..n {
                            gb[j] += gr[j];
                        }
                    }
                    set_adj(adj, *beta, gb);
                }
                if self.nodes[*x].needs_grad {
                    let mut gx = vec![0.0; g.len()];
                    for (r, (gr, hr)) in g.chunks_exact(n).zip(xhat.chunks_exact(n)).enumerate() {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..n {
                            let dh = gr[j] * tg.data[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh /= n as f64;
                        mean_dh_h /= n as f64;
                        let is = inv_std[r];
                        for j in 0..n {
                            let dh = gr[j] * tg.data[j];
                            gx[r * n + j] = is * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                    set_adj(adj, *x, gx);
                }
            }
            Op::MeanRows { x } => {
                if self.nodes[*x].needs_grad {
                    let tx = self.nodes[*x].value.tensor();
                    let (m, n) = (tx.rows(), tx.cols());
                    let inv = 1.0 / m as f64;
                    let mut gx = vec![0.0; m * n];
                    for row in gx.chunks_exact_mut(n) {
                        for (o, &gv) in row.iter_mut().zip(g) {
                            *o = gv * inv;
                        }
                    }
                    set_adj(adj, *x, gx);
                }
            }
            Op::Softmax { x, temperature } => {
                if self.nodes[*x].needs_grad {
                    let y = self.nodes[idx].value.tensor();
                    let n = y.cols();
                    let mut gx = vec![0.0; g.len()];
                    for ((gr, yr), or) in g
                        .chunks_exact(n)
                        .zip(y.data.chunks_exact(n))
                        .zip(gx.chunks_exact_mut(n))
                    {
                        let dot: f64 = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            or[j] = yr[j] * (gr[j] - dot) / temperature;
                        }
                    }
                    set_adj(adj, *x, gx);
                }
            }
            Op::ColumnNorm { x } => {
                if self.nodes[*x].needs_grad {
                    let tx = self.nodes[*x].value.tensor();
                    let norms = &self.nodes[idx].value.tensor().data;
                    let n = tx.cols();
                    let mut gx = vec![0.0; tx.len()];
                    for (xr, or) in tx.data.chunks_exact(n).zip(gx.chunks_exact_mut(n)) {
                        for j in 0..n {
                            if norms[j] > 0.0 {
                                or[j] = g[j] * xr[j] / norms[j];
                            }
                        }
                    }
                    set_adj(adj, *x, gx);
                }
            }
            Op::ScaleCols { x, s } => {
                let tx = self.nodes[*x].value.tensor();
                let ts = self.nodes[*s].value.tensor();
                let n = tx.cols();
                if self.nodes[*x].needs_grad {
                    let mut gx = vec![0.0; tx.len()];
                    for (gr, or) in g.chunks_exact(n).zip(gx.chunks_exact_mut(n)) {
                        for j in 0..n {
                            or[j] = gr[j] * ts.data[j];
                        }
                    }
                    set_adj(adj, *x, gx);
                }
                if self.nodes[*s].needs_grad {
                    let mut gs = vec![0.0; n];
                    for (gr, xr) in g.chunks_exact(n).zip(tx.data.chunks_exact(n)) {
                        for j in 0..n {
                            gs[j] += gr[j] * xr[j];
                        }
                    }
                    set_adj(adj, *s, gs);
                }
            }
            Op::Broadcast11 { x } => {
                if self.nodes[*x].needs_grad {
                    set_adj(adj, *x, vec![g.iter().sum()]);
                }
            }
            Op::MatmulNN { a, b } => {
                let ta = self.nodes[*a].value.tensor();
                let tb = self.nodes[*b].value.tensor();
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.nodes[*a].needs_grad {
                    set_adj(adj, *a, matmul_nt(g, &tb.data, m, n, k));
                }
                if self.nodes[*b].needs_grad {
                    set_adj(adj, *b, matmul_tn(&ta.data, g, m, k, n));
                }
            }
            Op::MatmulNT { a, b } => {
                let ta = self.nodes[*a].value.tensor();
                let tb = self.nodes[*b].value.tensor();
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                if self.nodes[*a].needs_grad {
                    set_adj(adj, *a, matmul_nn(g, &tb.data, m, n, k));
                }
                if self.nodes[*b].needs_grad {
                    set_adj(adj, *b, matmul_tn(g, &ta.data, m, n, k));
                }
            }
            Op::SliceCols { x, start } => {
                if self.nodes[*x].needs_grad {
                    let tx = self.nodes[*x].value.tensor();
                    let (m, n) = (tx.rows(), tx.cols());
                    let len = self.nodes[idx].value.tensor().cols();
                    let mut gx = vec![0.0; m * n];
                    for i in 0..m {
                        let src = &g[i * len..(i + 1) * len];
                        let dst = &mut gx[i * n + start..i * n + start + len];
                        dst.copy_from_slice(src);
                    }
                    set_adj(adj, *x, gx);
                }
            }
            Op::ConcatCols { parts } => {
                let m = self.nodes[idx].value.tensor().rows();
                let n = self.nodes[idx].value.tensor().cols();
                let mut offset = 0;
                for &p in parts {
                    let pc = self.nodes[p].value.tensor().cols();
                    if self.nodes[p].needs_grad {
                        let mut gp = vec![0.0; m * pc];
                        for i in 0..m {
                            gp[i * pc..(i + 1) * pc]
                                .copy_from_slice(&g[i * n + offset..i * n + offset + pc]);
                        }
                        add_adj(adj, p, &gp);
                    }
                    offset += pc;
                }
            }
            Op::Mix { w, mats } => {
                let tw = self.nodes[*w].value.tensor();
                if self.nodes[*w].needs_grad {
                    let mut gw = vec![0.0; mats.len()];
                    for (i, &mv) in mats.iter().enumerate() {
                        let tm = self.nodes[mv].value.tensor();
                        gw[i] = g.iter().zip(&tm.data).map(|(&a, &b)| a * b).sum();
                    }
                    set_adj(adj, *w, gw);
                }
                for (i, &mv) in mats.iter().enumerate() {
                    // A weight of exactly zero contributes an identically zero
                    // adjoint; skipping it keeps one-hot routing's gradient
                    // isolation literal (inactive experts receive nothing).
                    let wi = tw.data[i];
                    if self.nodes[mv].needs_grad && wi != 0.0 {
                        let gm: Vec<f64> = g.iter().map(|&v| v * wi).collect();
                        add_adj(adj, mv, &gm);
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if self.nodes[*logits].needs_grad {
                    let c = self.nodes[*logits].value.tensor().cols();
                    let b = labels.len();
                    let gs = g[0] / b as f64;
                    let mut gl = probs.clone();
                    for (i, &label) in labels.iter().enumerate() {
                        gl[i * c + label] -= 1.0;
                    }
                    for v in gl.iter_mut() {
                        *v *= gs;
                    }
                    set_adj(adj, *logits, gl);
                }
            }
            Op::KlUniform { w } => {
                if self.nodes[*w].needs_grad {
                    let tw = self.nodes[*w].value.tensor();
                    let (b, e) = (tw.rows(), tw.cols());
                    let ef = e as f64;
                    let gs = g[0] / b as f64;
                    let gw: Vec<f64> = tw
                        .data
                        .iter()
                        .map(|&v| if v > 0.0 { gs * ((v * ef).ln() + 1.0) } else { 0.0 })
                        .collect();
                    set_adj(adj, *w, gw);
                }
            }
        }
    }
}

fn add_adj(adj: &mut Vec<Option<Vec<f64>>>, idx: usize, g: &[f64]) {
    match &mut adj[idx] {
        Some(buf) => {
            for (b, &v) in buf.iter_mut().zip(g) {
                *b += v;
            }
        }
        none => *none = Some(g.to_vec()),
    }
}

fn set_adj(adj: &mut Vec<Option<Vec<f64>>>, idx: usize, g: Vec<f64>) {
    match &mut adj[idx] {
        Some(buf) => {
            for (b, v) in buf.iter_mut().zip(g) {
                *b += v;
            }
        }
        none => *none = Some(g),
    }
}
