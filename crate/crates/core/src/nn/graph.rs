//! Reverse-mode autodiff on a recorded operation tape.
//!
//! A [`Graph`] is built define-by-run: each builder computes the output
//! value eagerly and records the op. [`Graph::backward`] walks the tape in
//! reverse and deposits parameter gradients into a [`GradStore`].
//!
//! Two backward entry points exist because the cohesion loss couples
//! samples across a batch: per-sample graphs expose an intermediate node
//! (the persona token) and are later re-seeded with the gradient computed
//! by a small cross-sample graph ([`Graph::backward_seeded`]).

use std::collections::BTreeMap;

use super::param::{GradStore, ParamId, ParamSet};
use super::tensor::{matmul, matmul_nt, matmul_tn, transpose, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

/// Guard for log() in the cross-entropy-style losses.
const LOG_GUARD: f64 = 1e-12;
/// Guard for row normalization of near-zero vectors.
const NORM_GUARD: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op<E> {
    Matmul { a: NodeId, b: NodeId, out: NodeId },
    Transpose { a: NodeId, out: NodeId },
    Add { a: NodeId, b: NodeId, out: NodeId },
    Sub { a: NodeId, b: NodeId, out: NodeId },
    Mul { a: NodeId, b: NodeId, out: NodeId },
    Scale { a: NodeId, c: E, out: NodeId },
    AddRowBroadcast { a: NodeId, row: NodeId, out: NodeId },
    MulRowBroadcast { a: NodeId, row: NodeId, out: NodeId },
    ScaleByScalar { a: NodeId, s: NodeId, out: NodeId },
    Tanh { a: NodeId, out: NodeId },
    Gelu { a: NodeId, out: NodeId },
    SoftmaxRows { a: NodeId, out: NodeId },
    LayerNormRows {
        a: NodeId,
        gain: NodeId,
        bias: NodeId,
        out: NodeId,
        xhat: Tensor<E>,
        inv_std: Vec<E>,
    },
    SliceCols { a: NodeId, start: usize, out: NodeId },
    ConcatCols { parts: Vec<NodeId>, out: NodeId },
    SliceRows { a: NodeId, start: usize, out: NodeId },
    ConcatRows { parts: Vec<NodeId>, out: NodeId },
    EmbedLookup { table: NodeId, ids: Vec<usize>, out: NodeId },
    RowDiff { a: NodeId, out: NodeId },
    UnitNormRows { a: NodeId, out: NodeId, norms: Vec<E> },
    MeanRows { a: NodeId, out: NodeId },
    MeanAll { a: NodeId, out: NodeId },
    SumAll { a: NodeId, out: NodeId },
    CeLoss { logits: NodeId, targets: Vec<usize>, out: NodeId },
    PcLoss { sims: NodeId, pos: Vec<usize>, tau: E, out: NodeId },
    BceUnitLoss { pred: NodeId, target: Tensor<E>, out: NodeId },
}

impl<E> Op<E> {
    fn out(&self) -> NodeId {
        match self {
            Op::Matmul { out, .. }
            | Op::Transpose { out, .. }
            | Op::Add { out, .. }
            | Op::Sub { out, .. }
            | Op::Mul { out, .. }
            | Op::Scale { out, .. }
            | Op::AddRowBroadcast { out, .. }
            | Op::MulRowBroadcast { out, .. }
            | Op::ScaleByScalar { out, .. }
            | Op::Tanh { out, .. }
            | Op::Gelu { out, .. }
            | Op::SoftmaxRows { out, .. }
            | Op::LayerNormRows { out, .. }
            | Op::SliceCols { out, .. }
            | Op::ConcatCols { out, .. }
            | Op::SliceRows { out, .. }
            | Op::ConcatRows { out, .. }
            | Op::EmbedLookup { out, .. }
            | Op::RowDiff { out, .. }
            | Op::UnitNormRows { out, .. }
            | Op::MeanRows { out, .. }
            | Op::MeanAll { out, .. }
            | Op::SumAll { out, .. }
            | Op::CeLoss { out, .. }
            | Op::PcLoss { out, .. }
            | Op::BceUnitLoss { out, .. } => *out,
        }
    }
}

pub struct Graph<'p, E: Scalar> {
    params: &'p ParamSet<E>,
    values: Vec<Tensor<E>>,
    requires: Vec<bool>,
    ops: Vec<Op<E>>,
    param_nodes: BTreeMap<ParamId, NodeId>,
}

impl<'p, E: Scalar> Graph<'p, E> {
    pub fn new(params: &'p ParamSet<E>) -> Self {
        Graph {
            params,
            values: Vec::new(),
            requires: Vec::new(),
            ops: Vec::new(),
            param_nodes: BTreeMap::new(),
        }
    }

    fn push(&mut self, value: Tensor<E>, requires: bool, op: Option<Op<E>>) -> NodeId {
        self.values.push(value);
        self.requires.push(requires);
        let id = NodeId(self.values.len() - 1);
        if let Some(op) = op {
            debug_assert_eq!(op.out(), id);
            self.ops.push(op);
        }
        id
    }

    /// Bring a parameter into the graph. Frozen (non-trainable) parameters
    /// enter as constants: no gradient is ever computed for them.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let p = self.params.get(id);
        let node = self.push(p.value.clone(), p.trainable, None);
        self.param_nodes.insert(id, node);
        node
    }

    pub fn constant(&mut self, t: Tensor<E>) -> NodeId {
        self.push(t, false, None)
    }

    /// A leaf the caller wants gradients to flow to (used by gradient tests
    /// and the re-seeding machinery). Not tied to a parameter.
    pub fn input(&mut self, t: Tensor<E>) -> NodeId {
        self.push(t, true, None)
    }

    pub fn value(&self, n: NodeId) -> &Tensor<E> {
        &self.values[n.0]
    }

    pub fn scalar_value(&self, n: NodeId) -> E {
        let t = &self.values[n.0];
        assert_eq!(t.numel(), 1, "scalar_value on non-scalar node");
        t.data[0]
    }

    fn req2(&self, a: NodeId, b: NodeId) -> bool {
        self.requires[a.0] || self.requires[b.0]
    }

    // ---- builders ------------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul(&self.values[a.0], &self.values[b.0]);
        let req = self.req2(a, b);
        let out = NodeId(self.values.len());
        self.push(v, req, Some(Op::Matmul { a, b, out }))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = transpose(&self.values[a.0]);
        let req = self.requires[a.0];
        let out = NodeId(self.values.len());
        self.push(v, req, Some(Op::Transpose { a, out }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!((ta.rows, ta.cols), (tb.rows, tb.cols), "add shape mismatch");
        let mut v = ta.clone();
        v.add_scaled(tb, E::one());
        let req = self.req2(a, b);
        let out = NodeId(self.values.len());
        self.push(v, req, Some(Op::Add { a, b, out }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!((ta.rows, ta.cols), (tb.rows, tb.cols), "sub shape mismatch");
        let mut v = ta.clone();
        v.add_scaled(tb, -E::one());
        let req = self.req2(a, b);
        let out = NodeId(self.values.len());
        self.push(v, req, Some(Op::Sub { a, b, out }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!((ta.rows, ta.cols), (tb.rows, tb.cols), "mul shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| x * y).collect();
        let v = Tensor::from_vec(ta.rows, ta.cols, data);
        let req = self.req2(a, b);
        let out = NodeId(self.values.len());
        self.push(v, req, Some(Op::Mul { a, b, out }))
    }

    pub fn scale(&mut self, a: NodeId, c: E) -> NodeId {
        let v = self.values[a.0].map(|x| x * c);
        let req = self.requires[a.0];
        let out = NodeId(self.values.len());
        self.push(v, req, Some(Op::Scale { a, c, out }))
    }

    /// out[i, :] = a[i, :] + row (row is 1 x d). The bias pattern.
    pub fn add_row_broadcast(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (ta, tr) = (&self.values[a.0], &self.values[row.0]);
        assert_eq!(tr.rows, 1, "broadcast row must be 1 x d");
        assert_eq!(ta.cols, tr.cols, "broadcast width mismatch");
        let mut v = ta.clone();
        for i in 0..v.rows {
            let r = v.row_mut(i);
            for (x, &b) in r.iter_mut().zip(&tr.data) {
                *x = *x + b;
            }
        }
        let req = self.req2(a, row);
        let out = NodeId(self.values.len());
        self.push(v, req, Some(Op::AddRowBroadcast { a, row, out }))
    }

    /// out[i, :] = a[i, :] * row elementwise (row is 1 x d). Feature-wise
    /// modulation.
    pub fn mul_row_broadcast(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (ta, tr) = (&self.values[a.0], &self.values[row.0]);
        assert_eq!(tr.rows, 1, "broadcast row must be 1 x d");
        assert_eq!(ta.cols, tr.cols, "broadcast width mismatch");
        let mut v = ta.clone();
        for i in 0..v.rows {
            let r = v.row_mut(i);
            for (x, &m) in r.iter_mut().zip(&tr.data) {
                *x = *x * m;
            }
        }
        let req = self.req2(a, row);
        let out = NodeId(self.values.len());
        self.push(v, req, Some(Op::MulRowBroadcast { a, row, out }))
    }

    /// out = a * s where s is a 1 x 1 node (gates, learned scalars).
    pub fn scale_by_scalar(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let sv = self.values[s.0].data[0];
        assert_eq!(self.values[s.0].numel(), 1, "scale_by_scalar needs 1 x 1");
        let v = self.values[a.0].map(|x| x * sv);
        let req = self.req2(a, s);
        let out = NodeId(self.values.len());
        self.push(v, req, Some(Op::ScaleByScalar { a, s, out }))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.values[a.0].map(|x| x.tanh());
        let req = self.requires[a.0];
        let out = NodeId(self.values.len());
        self.push(v, req, Some(Op::Tanh { a, out }))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.values[a.0].map(gelu_fwd);
        let req = self.requires[a.0];
        let out = NodeId(self.values.len());
        self.push(v, req, Some(Op::Gelu { a, out }))
    }

    /// Row-wise softmax with max-subtraction for stability.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let ta = &self.values[a.0];
        let mut v = Tensor::zeros(ta.rows, ta.cols);
        for i in 0..ta.rows {
            softmax_into(ta.row(i), v.row_mut(i));
        }
        let req = self.requires[a.0];
        let out = NodeId(self.values.len());
        self.push(v, req, Some(Op::SoftmaxRows { a, out }))
    }

    /// Row-wise layer norm with learned gain/bias (both 1 x d).
    pub fn layer_norm_rows(&mut self, a: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let eps = E::from_f64(1e-5);
        let ta = &self.values[a.0];
        let (tg, tb) = (&self.values[gain.0], &self.values[bias.0]);
        assert_eq!(tg.cols, ta.cols, "layer norm gain width");
        assert_eq!(tb.cols, ta.cols, "layer norm bias width");
        let d = ta.cols;
        let dn = E::from_usize(d);
        let mut xhat = Tensor::zeros(ta.rows, d);
        let mut inv_std = Vec::with_capacity(ta.rows);
        let mut v = Tensor::zeros(ta.rows, d);
        for i in 0..ta.rows {
            let row = ta.row(i);
            let mean = row.iter().copied().sum::<E>() / dn;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<E>() / dn;
            let istd = E::one() / (var + eps).sqrt();
            inv_std.push(istd);
            for j in 0..d {
                let xh = (row[j] - mean) * istd;
                xhat.set(i, j, xh);
                v.set(i, j, xh * tg.data[j] + tb.data[j]);
            }
        }
        let req = self.requires[a.0] || self.req2(gain, bias);
        let out = NodeId(self.values.len());
        self.push(
            v,
            req,
            Some(Op::LayerNormRows {
                a,
                gain,
                bias,
                out,
                xhat,
                inv_std,
            }),
        )
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let ta = &self.values[a.0];
        assert!(start + len <= ta.cols, "slice_cols out of range");
        let mut v = Tensor::zeros(ta.rows, len);
        for i in 0..ta.rows {
            v.row_mut(i).copy_from_slice(&ta.row(i)[start..start + len]);
        }
        let req = self.requires[a.0];
        let out = NodeId(self.values.len());
        self.push(v, req, Some(Op::SliceCols { a, start, out }))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.values[parts[0].0].rows;
        let total: usize = parts.iter().map(|p| self.values[p.0].cols).sum();
        let mut v = Tensor::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let tp = &self.values[p.0];
            assert_eq!(tp.rows, rows, "concat_cols row mismatch");
            for i in 0..rows {
                v.row_mut(i)[off..off + tp.cols].copy_from_slice(tp.row(i));
            }
            off += tp.cols;
        }
        let req = parts.iter().any(|p| self.requires[p.0]);
        let out = NodeId(self.values.len());
        self.push(
            v,
            req,
            Some(Op::ConcatCols {
                parts: parts.to_vec(),
                out,
            }),
        )
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let ta = &self.values[a.0];
        assert!(start + len <= ta.rows, "slice_rows out of range");
        let mut v = Tensor::zeros(len, ta.cols);
        v.data
            .copy_from_slice(&ta.data[start * ta.cols..(start + len) * ta.cols]);
        let req = self.requires[a.0];
        let out = NodeId(self.values.len());
        self.push(v, req, Some(Op::SliceRows { a, start, out }))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let cols = self.values[parts[0].0].cols;
        let total: usize = parts.iter().map(|p| self.values[p.0].rows).sum();
        let mut v = Tensor::zeros(total, cols);
        let mut off = 0;
        for &p in parts {
            let tp = &self.values[p.0];
            assert_eq!(tp.cols, cols, "concat_rows col mismatch");
            v.data[off..off + tp.numel()].copy_from_slice(&tp.data);
            off += tp.numel();
        }
        let req = parts.iter().any(|p| self.requires[p.0]);
        let out = NodeId(self.values.len());
        self.push(
            v,
            req,
            Some(Op::ConcatRows {
                parts: parts.to_vec(),
                out,
            }),
        )
    }

    /// Gather rows of an embedding table.
    pub fn embed_lookup(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let tt = &self.values[table.0];
        let mut v = Tensor::zeros(ids.len(), tt.cols);
        for (i, &id) in ids.iter().enumerate() {
            assert!(id < tt.rows, "token id {} out of vocab {}", id, tt.rows);
            v.row_mut(i).copy_from_slice(tt.row(id));
        }
        let req = self.requires[table.0];
        let out = NodeId(self.values.len());
        self.push(
            v,
            req,
            Some(Op::EmbedLookup {
                table,
                ids: ids.to_vec(),
                out,
            }),
        )
    }

    /// out[i] = a[i+1] - a[i]; (rows-1) x cols. Finite-difference velocity.
    pub fn row_diff(&mut self, a: NodeId) -> NodeId {
        let ta = &self.values[a.0];
        assert!(ta.rows >= 2, "row_diff needs at least 2 rows");
        let mut v = Tensor::zeros(ta.rows - 1, ta.cols);
        for i in 0..ta.rows - 1 {
            for j in 0..ta.cols {
                v.set(i, j, ta.get(i + 1, j) - ta.get(i, j));
            }
        }
        let req = self.requires[a.0];
        let out = NodeId(self.values.len());
        self.push(v, req, Some(Op::RowDiff { a, out }))
    }

    /// L2-normalize each row (guarded against zero rows).
    pub fn unit_norm_rows(&mut self, a: NodeId) -> NodeId {
        let ta = &self.values[a.0];
        let guard = E::from_f64(NORM_GUARD);
        let mut v = Tensor::zeros(ta.rows, ta.cols);
        let mut norms = Vec::with_capacity(ta.rows);
        for i in 0..ta.rows {
            let row = ta.row(i);
            let n = row.iter().map(|&x| x * x).sum::<E>().sqrt().max(guard);
            norms.push(n);
            for (o, &x) in v.row_mut(i).iter_mut().zip(row) {
                *o = x / n;
            }
        }
        let req = self.requires[a.0];
        let out = NodeId(self.values.len());
        self.push(v, req, Some(Op::UnitNormRows { a, out, norms }))
    }

    /// Mean over rows -> 1 x d.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let ta = &self.values[a.0];
        let mut v = Tensor::zeros(1, ta.cols);
        for i in 0..ta.rows {
            for (o, &x) in v.data.iter_mut().zip(ta.row(i)) {
                *o = *o + x;
            }
        }
        let inv = E::one() / E::from_usize(ta.rows);
        v.scale_in_place(inv);
        let req = self.requires[a.0];
        let out = NodeId(self.values.len());
        self.push(v, req, Some(Op::MeanRows { a, out }))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let ta = &self.values[a.0];
        let v = Tensor::from_vec(1, 1, vec![ta.sum() / E::from_usize(ta.numel())]);
        let req = self.requires[a.0];
        let out = NodeId(self.values.len());
        self.push(v, req, Some(Op::MeanAll { a, out }))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let ta = &self.values[a.0];
        let v = Tensor::from_vec(1, 1, vec![ta.sum()]);
        let req = self.requires[a.0];
        let out = NodeId(self.values.len());
        self.push(v, req, Some(Op::SumAll { a, out }))
    }

    /// Mean squared error between two same-shape nodes.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    /// Mean cross-entropy of row i of `logits` against class `targets[i]`.
    /// Stable log-softmax form.
    pub fn ce_loss(&mut self, logits: NodeId, targets: &[usize]) -> NodeId {
        let tl = &self.values[logits.0];
        assert_eq!(tl.rows, targets.len(), "ce_loss target count");
        let mut acc = 0.0f64;
        for (i, &t) in targets.iter().enumerate() {
            assert!(t < tl.cols, "ce_loss target out of range");
            let row = tl.row(i);
            let lse = log_sum_exp(row);
            acc += lse - row[t].to_f64();
        }
        let v = Tensor::from_vec(1, 1, vec![E::from_f64(acc / targets.len() as f64)]);
        let req = self.requires[logits.0];
        let out = NodeId(self.values.len());
        self.push(
            v,
            req,
            Some(Op::CeLoss {
                logits,
                targets: targets.to_vec(),
                out,
            }),
        )
    }

    /// Cohesion loss over a 2N x 2N similarity matrix: each anchor i has one
    /// positive at column pos[i]; the denominator ranges over every other
    /// row (all k != i), temperature tau.
    pub fn pc_loss(&mut self, sims: NodeId, pos: &[usize], tau: E) -> NodeId {
        let ts = &self.values[sims.0];
        let n = ts.rows;
        assert_eq!(ts.cols, n, "pc_loss needs a square similarity matrix");
        assert_eq!(pos.len(), n, "pc_loss positive per anchor");
        let tau_f = tau.to_f64();
        let mut acc = 0.0f64;
        for (i, &p) in pos.iter().enumerate() {
            assert!(p < n && p != i, "positive must be another row");
            let row = ts.row(i);
            let scaled: Vec<f64> = (0..n)
                .filter(|&k| k != i)
                .map(|k| row[k].to_f64() / tau_f)
                .collect();
            let lse = log_sum_exp_f64(&scaled);
            acc += lse - row[p].to_f64() / tau_f;
        }
        let v = Tensor::from_vec(1, 1, vec![E::from_f64(acc / n as f64)]);
        let req = self.requires[sims.0];
        let out = NodeId(self.values.len());
        self.push(
            v,
            req,
            Some(Op::PcLoss {
                sims,
                pos: pos.to_vec(),
                tau,
                out,
            }),
        )
    }

    /// Mean binary cross-entropy against targets in {0,1}. Predictions are
    /// clamped to [0,1] and log arguments guarded, so a perfect prediction
    /// contributes exactly zero loss and zero gradient.
    pub fn bce_unit_loss(&mut self, pred: NodeId, target: Tensor<E>) -> NodeId {
        let tp = &self.values[pred.0];
        assert_eq!((tp.rows, tp.cols), (target.rows, target.cols), "bce shapes");
        let mut acc = 0.0f64;
        for (&x, &y) in tp.data.iter().zip(&target.data) {
            let p = x.to_f64().clamp(0.0, 1.0);
            let y = y.to_f64();
            acc -= y * p.max(LOG_GUARD).ln() + (1.0 - y) * (1.0 - p).max(LOG_GUARD).ln();
        }
        let v = Tensor::from_vec(1, 1, vec![E::from_f64(acc / tp.numel() as f64)]);
        let req = self.requires[pred.0];
        let out = NodeId(self.values.len());
        self.push(v, req, Some(Op::BceUnitLoss { pred, target, out }))
    }

    // ---- backward ------------------------------------------------------

    /// Backpropagate from a scalar loss node with seed 1.
    pub fn backward(&mut self, loss: NodeId, store: &mut GradStore<E>) {
        assert_eq!(self.values[loss.0].numel(), 1, "backward needs a scalar loss");
        let seed = Tensor::from_vec(1, 1, vec![E::one()]);
        self.run_backward(loss, seed, store);
    }

    /// Backpropagate from an arbitrary node with an externally supplied
    /// cotangent (same shape as the node value).
    pub fn backward_seeded(&mut self, node: NodeId, seed: &Tensor<E>, store: &mut GradStore<E>) {
        let tv = &self.values[node.0];
        assert_eq!(
            (tv.rows, tv.cols),
            (seed.rows, seed.cols),
            "seed shape must match node"
        );
        self.run_backward(node, seed.clone(), store);
    }

    /// Run backward and also return the full per-node gradient buffer
    /// (used to read gradients of `input` leaves).
    pub fn backward_with_node_grads(
        &mut self,
        loss: NodeId,
        store: &mut GradStore<E>,
    ) -> Vec<Option<Tensor<E>>> {
        assert_eq!(self.values[loss.0].numel(), 1, "backward needs a scalar loss");
        let seed = Tensor::from_vec(1, 1, vec![E::one()]);
        self.run_backward_buf(loss, seed, store)
    }

    fn run_backward(&mut self, node: NodeId, seed: Tensor<E>, store: &mut GradStore<E>) {
        let _ = self.run_backward_buf(node, seed, store);
    }

    fn run_backward_buf(
        &mut self,
        node: NodeId,
        seed: Tensor<E>,
        store: &mut GradStore<E>,
    ) -> Vec<Option<Tensor<E>>> {
        let mut grads: Vec<Option<Tensor<E>>> = vec![None; self.values.len()];
        if !self.requires[node.0] {
            return grads;
        }
        grads[node.0] = Some(seed);

        for op in self.ops.iter().rev() {
            let out = op.out();
            if out.0 > node.0 {
                continue; // recorded after the seed; cannot influence it
            }
            let Some(dout) = grads[out.0].take() else {
                continue;
            };
            self.apply_backward(op, &dout, &mut grads);
            grads[out.0] = Some(dout);
        }

        for (&pid, &nid) in &self.param_nodes {
            if let Some(g) = &grads[nid.0] {
                store.accumulate(pid, g, E::one());
            }
        }
        grads
    }

    fn apply_backward(&self, op: &Op<E>, dout: &Tensor<E>, grads: &mut [Option<Tensor<E>>]) {
        // Lazily allocate a zero gradient for `id` if it requires grad.
        macro_rules! slot {
            ($id:expr) => {{
                let id: NodeId = $id;
                if !self.requires[id.0] {
                    None
                } else {
                    let (r, c) = {
                        let t = &self.values[id.0];
                        (t.rows, t.cols)
                    };
                    Some(grads[id.0].get_or_insert_with(|| Tensor::zeros(r, c)))
                }
            }};
        }

        match op {
            Op::Matmul { a, b, .. } => {
                let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
                if self.requires[a.0] {
                    let da = matmul_nt(dout, tb);
                    slot!(*a).unwrap().add_scaled(&da, E::one());
                }
                if self.requires[b.0] {
                    let db = matmul_tn(ta, dout);
                    slot!(*b).unwrap().add_scaled(&db, E::one());
                }
            }
            Op::Transpose { a, .. } => {
                if let Some(g) = slot!(*a) {
                    g.add_scaled(&transpose(dout), E::one());
                }
            }
            Op::Add { a, b, .. } => {
                if let Some(g) = slot!(*a) {
                    g.add_scaled(dout, E::one());
                }
                if let Some(g) = slot!(*b) {
                    g.add_scaled(dout, E::one());
                }
            }
            Op::Sub { a, b, .. } => {
                if let Some(g) = slot!(*a) {
                    g.add_scaled(dout, E::one());
                }
                if let Some(g) = slot!(*b) {
                    g.add_scaled(dout, -E::one());
                }
            }
            Op::Mul { a, b, .. } => {
                if self.requires[a.0] {
                    let tb = &self.values[b.0];
                    let g = slot!(*a).unwrap();
                    for ((gd, &d), &bv) in g.data.iter_mut().zip(&dout.data).zip(&tb.data) {
                        *gd = *gd + d * bv;
                    }
                }
                if self.requires[b.0] {
                    let ta = &self.values[a.0];
                    let g = slot!(*b).unwrap();
                    for ((gd, &d), &av) in g.data.iter_mut().zip(&dout.data).zip(&ta.data) {
                        *gd = *gd + d * av;
                    }
                }
            }
            Op::Scale { a, c, .. } => {
                if let Some(g) = slot!(*a) {
                    g.add_scaled(dout, *c);
                }
            }
            Op::AddRowBroadcast { a, row, .. } => {
                if let Some(g) = slot!(*a) {
                    g.add_scaled(dout, E::one());
                }
                if self.requires[row.0] {
                    let g = slot!(*row).unwrap();
                    for i in 0..dout.rows {
                        for (gd, &d) in g.data.iter_mut().zip(dout.row(i)) {
                            *gd = *gd + d;
                        }
                    }
                }
            }
            Op::MulRowBroadcast { a, row, .. } => {
                if self.requires[a.0] {
                    let tr = &self.values[row.0];
                    let g = slot!(*a).unwrap();
                    for i in 0..dout.rows {
                        for ((gd, &d), &m) in
                            g.row_mut(i).iter_mut().zip(dout.row(i)).zip(&tr.data)
                        {
                            *gd = *gd + d * m;
                        }
                    }
                }
                if self.requires[row.0] {
                    let ta = &self.values[a.0];
                    let g = slot!(*row).unwrap();
                    for i in 0..dout.rows {
                        for ((gd, &d), &av) in
                            g.data.iter_mut().zip(dout.row(i)).zip(ta.row(i))
                        {
                            *gd = *gd + d * av;
                        }
                    }
                }
            }
            Op::ScaleByScalar { a, s, .. } => {
                let sv = self.values[s.0].data[0];
                if let Some(g) = slot!(*a) {
                    g.add_scaled(dout, sv);
                }
                if self.requires[s.0] {
                    let ta = &self.values[a.0];
                    let mut acc = E::zero();
                    for (&d, &av) in dout.data.iter().zip(&ta.data) {
                        acc = acc + d * av;
                    }
                    let g = slot!(*s).unwrap();
                    g.data[0] = g.data[0] + acc;
                }
            }
            Op::Tanh { a, out } => {
                if self.requires[a.0] {
                    let ty = &self.values[out.0];
                    let g = slot!(*a).unwrap();
                    for ((gd, &d), &y) in g.data.iter_mut().zip(&dout.data).zip(&ty.data) {
                        *gd = *gd + d * (E::one() - y * y);
                    }
                }
            }
            Op::Gelu { a, .. } => {
                if self.requires[a.0] {
                    let tx = &self.values[a.0];
                    let g = slot!(*a).unwrap();
                    for ((gd, &d), &x) in g.data.iter_mut().zip(&dout.data).zip(&tx.data) {
                        *gd = *gd + d * gelu_grad(x);
                    }
                }
            }
            Op::SoftmaxRows { a, out } => {
                if self.requires[a.0] {
                    let ty = &self.values[out.0];
                    let g = slot!(*a).unwrap();
                    for i in 0..ty.rows {
                        let yrow = ty.row(i);
                        let drow = dout.row(i);
                        let dot: E = yrow.iter().zip(drow).map(|(&y, &d)| y * d).sum();
                        let grow = g.row_mut(i);
                        for j in 0..yrow.len() {
                            grow[j] = grow[j] + yrow[j] * (drow[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNormRows {
                a,
                gain,
                bias,
                xhat,
                inv_std,
                ..
            } => {
                let tg = &self.values[gain.0];
                let d = xhat.cols;
                let dn = E::from_usize(d);
                if self.requires[a.0] {
                    let g = slot!(*a).unwrap();
                    for i in 0..xhat.rows {
                        let xh = xhat.row(i);
                        let drow = dout.row(i);
                        // dxhat = dy * gain
                        let mut sum_dxh = E::zero();
                        let mut sum_dxh_xh = E::zero();
                        for j in 0..d {
                            let dxh = drow[j] * tg.data[j];
                            sum_dxh = sum_dxh + dxh;
                            sum_dxh_xh = sum_dxh_xh + dxh * xh[j];
                        }
                        let grow = g.row_mut(i);
                        for j in 0..d {
                            let dxh = drow[j] * tg.data[j];
                            let dx = inv_std[i] * (dxh - sum_dxh / dn - xh[j] * sum_dxh_xh / dn);
                            grow[j] = grow[j] + dx;
                        }
                    }
                }
                if self.requires[gain.0] {
                    let g = slot!(*gain).unwrap();
                    for i in 0..xhat.rows {
                        for (j, gd) in g.data.iter_mut().enumerate() {
                            *gd = *gd + dout.get(i, j) * xhat.get(i, j);
                        }
                    }
                }
                if self.requires[bias.0] {
                    let g = slot!(*bias).unwrap();
                    for i in 0..dout.rows {
                        for (gd, &dv) in g.data.iter_mut().zip(dout.row(i)) {
                            *gd = *gd + dv;
                        }
                    }
                }
            }
            Op::SliceCols { a, start, .. } => {
                if self.requires[a.0] {
                    let g = slot!(*a).unwrap();
                    for i in 0..dout.rows {
                        let grow = g.row_mut(i);
                        for (j, &d) in dout.row(i).iter().enumerate() {
                            grow[start + j] = grow[start + j] + d;
                        }
                    }
                }
            }
            Op::ConcatCols { parts, .. } => {
                let mut off = 0;
                for &p in parts {
                    let w = self.values[p.0].cols;
                    if self.requires[p.0] {
                        let g = slot!(p).unwrap();
                        for i in 0..dout.rows {
                            let grow = g.row_mut(i);
                            let drow = &dout.row(i)[off..off + w];
                            for (gd, &d) in grow.iter_mut().zip(drow) {
                                *gd = *gd + d;
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::SliceRows { a, start, .. } => {
                if self.requires[a.0] {
                    let g = slot!(*a).unwrap();
                    let cols = g.cols;
                    for i in 0..dout.rows {
                        let grow = &mut g.data[(start + i) * cols..(start + i + 1) * cols];
                        for (gd, &d) in grow.iter_mut().zip(dout.row(i)) {
                            *gd = *gd + d;
                        }
                    }
                }
            }
            Op::ConcatRows { parts, .. } => {
                let mut off = 0;
                for &p in parts {
                    let r = self.values[p.0].rows;
                    if self.requires[p.0] {
                        let g = slot!(p).unwrap();
                        for i in 0..r {
                            for (gd, &d) in g.row_mut(i).iter_mut().zip(dout.row(off + i)) {
                                *gd = *gd + d;
                            }
                        }
                    }
                    off += r;
                }
            }
            Op::EmbedLookup { table, ids, .. } => {
                if self.requires[table.0] {
                    let g = slot!(*table).unwrap();
                    for (i, &id) in ids.iter().enumerate() {
                        for (gd, &d) in g.row_mut(id).iter_mut().zip(dout.row(i)) {
                            *gd = *gd + d;
                        }
                    }
                }
            }
            Op::RowDiff { a, .. } => {
                if self.requires[a.0] {
                    let g = slot!(*a).unwrap();
                    for i in 0..dout.rows {
                        for (j, &d) in dout.row(i).iter().enumerate() {
                            let up = g.get(i + 1, j) + d;
                            g.set(i + 1, j, up);
                            let lo = g.get(i, j) - d;
                            g.set(i, j, lo);
                        }
                    }
                }
            }
            Op::UnitNormRows { a, out, norms } => {
                if self.requires[a.0] {
                    let ty = &self.values[out.0];
                    let g = slot!(*a).unwrap();
                    for i in 0..ty.rows {
                        let yrow = ty.row(i);
                        let drow = dout.row(i);
                        let dot: E = yrow.iter().zip(drow).map(|(&y, &d)| y * d).sum();
                        let grow = g.row_mut(i);
                        for j in 0..yrow.len() {
                            grow[j] = grow[j] + (drow[j] - yrow[j] * dot) / norms[i];
                        }
                    }
                }
            }
            Op::MeanRows { a, .. } => {
                if self.requires[a.0] {
                    let g = slot!(*a).unwrap();
                    let inv = E::one() / E::from_usize(g.rows);
                    for i in 0..g.rows {
                        for (gd, &d) in g.row_mut(i).iter_mut().zip(&dout.data) {
                            *gd = *gd + d * inv;
                        }
                    }
                }
            }
            Op::MeanAll { a, .. } => {
                if self.requires[a.0] {
                    let g = slot!(*a).unwrap();
                    let d = dout.data[0] / E::from_usize(g.numel());
                    for gd in g.data.iter_mut() {
                        *gd = *gd + d;
                    }
                }
            }
            Op::SumAll { a, .. } => {
                if self.requires[a.0] {
                    let g = slot!(*a).unwrap();
                    let d = dout.data[0];
                    for gd in g.data.iter_mut() {
                        *gd = *gd + d;
                    }
                }
            }
            Op::CeLoss { logits, targets, .. } => {
                if self.requires[logits.0] {
                    let tl = &self.values[logits.0];
                    let scale = dout.data[0] / E::from_usize(targets.len());
                    let g = slot!(*logits).unwrap();
                    let mut probs = vec![E::zero(); tl.cols];
                    for (i, &t) in targets.iter().enumerate() {
                        softmax_into(tl.row(i), &mut probs);
                        let grow = g.row_mut(i);
                        for (j, gd) in grow.iter_mut().enumerate() {
                            let ind = if j == t { E::one() } else { E::zero() };
                            *gd = *gd + (probs[j] - ind) * scale;
                        }
                    }
                }
            }
            Op::PcLoss { sims, pos, tau, .. } => {
                if self.requires[sims.0] {
                    let ts = &self.values[sims.0];
                    let n = ts.rows;
                    let scale = dout.data[0] / (E::from_usize(n) * *tau);
                    let g = slot!(*sims).unwrap();
                    let tau_f = (*tau).to_f64();
                    for (i, &p) in pos.iter().enumerate() {
                        let row = ts.row(i);
                        // softmax over k != i of s_ik / tau
                        let mx = (0..n)
                            .filter(|&k| k != i)
                            .map(|k| row[k].to_f64() / tau_f)
                            .fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = (0..n)
                            .filter(|&k| k != i)
                            .map(|k| (row[k].to_f64() / tau_f - mx).exp())
                            .sum();
                        let grow = g.row_mut(i);
                        for k in 0..n {
                            if k == i {
                                continue;
                            }
                            let w = ((row[k].to_f64() / tau_f - mx).exp() / denom).max(0.0);
                            let ind = if k == p { 1.0 } else { 0.0 };
                            grow[k] = grow[k] + E::from_f64(w - ind) * scale;
                        }
                    }
                }
            }
            Op::BceUnitLoss { pred, target, .. } => {
                if self.requires[pred.0] {
                    let tp = &self.values[pred.0];
                    let scale = dout.data[0].to_f64() / tp.numel() as f64;
                    let g = slot!(*pred).unwrap();
                    for ((gd, &x), &y) in g.data.iter_mut().zip(&tp.data).zip(&target.data) {
                        let xf = x.to_f64();
                        if xf <= 0.0 || xf >= 1.0 {
                            continue; // clamped region: zero subgradient
                        }
                        let yf = y.to_f64();
                        let mut d = 0.0;
                        if xf > LOG_GUARD {
                            d -= yf / xf;
                        }
                        if 1.0 - xf > LOG_GUARD {
                            d += (1.0 - yf) / (1.0 - xf);
                        }
                        *gd = *gd + E::from_f64(d * scale);
                    }
                }
            }
        }
    }
}

fn gelu_fwd<E: Scalar>(x: E) -> E {
    let c = E::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let k = E::from_f64(0.044715);
    let half = E::from_f64(0.5);
    let u = c * (x + k * x * x * x);
    half * x * (E::one() + u.tanh())
}

fn gelu_grad<E: Scalar>(x: E) -> E {
    let c = E::from_f64(0.797_884_560_802_865_4);
    let k = E::from_f64(0.044715);
    let half = E::from_f64(0.5);
    let three = E::from_f64(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (E::one() + three * k * x * x);
    half * (E::one() + t) + half * x * (E::one() - t * t) * du
}

fn softmax_into<E: Scalar>(row: &[E], out: &mut [E]) {
    let mx = row.iter().copied().fold(E::neg_infinity(), E::max);
    let mut denom = E::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        let e = (x - mx).exp();
        *o = e;
        denom = denom + e;
    }
    for o in out.iter_mut() {
        *o = *o / denom;
    }
}

fn log_sum_exp<E: Scalar>(row: &[E]) -> f64 {
    let vals: Vec<f64> = row.iter().map(|&x| x.to_f64()).collect();
    log_sum_exp_f64(&vals)
}

fn log_sum_exp_f64(vals: &[f64]) -> f64 {
    let mx = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    mx + vals.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params64() -> ParamSet<f64> {
        ParamSet::new()
    }

    #[test]
    fn softmax_known_values() {
        let ps = params64();
        let mut g = Graph::new(&ps);
        let x = g.constant(Tensor::row_vector(&[0.9, 0.5]));
        let y = g.softmax_rows(x);
        let v = g.value(y);
        assert!((v.data[0] - 0.598687660112452).abs() < 1e-9);
        assert!((v.data[1] - 0.401312339887548).abs() < 1e-9);
        assert!((v.data[0] + v.data[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let ps = params64();
        let mut g = Graph::new(&ps);
        let x = g.constant(Tensor::row_vector(&[1e3, 1e3 - 1.0, -1e3]));
        let y = g.softmax_rows(x);
        let v = g.value(y);
        assert!(v.data.iter().all(|x| x.is_finite()));
        let s: f64 = v.data.iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
        // e / (e + 1) for the top-two race, third is ~0
        assert!((v.data[0] - std::f64::consts::E / (std::f64::consts::E + 1.0)).abs() < 1e-9);
        assert!(v.data[2].abs() < 1e-100);
    }

    #[test]
    fn backward_linear_closed_form() {
        // L = mean(w * x) with x fixed: dL/dw = x / numel
        let mut ps = params64();
        let w = ps.add("w", Tensor::row_vector(&[2.0, -3.0, 0.5]));
        let mut g = Graph::new(&ps);
        let wn = g.param(w);
        let x = g.constant(Tensor::row_vector(&[1.0, 2.0, 3.0]));
        let prod = g.mul(wn, x);
        let loss = g.mean_all(prod);
        let mut store = GradStore::new();
        g.backward(loss, &mut store);
        let gw = store.get(w).unwrap();
        for (gv, expect) in gw.data.iter().zip([1.0 / 3.0, 2.0 / 3.0, 1.0]) {
            assert!((gv - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_quadratic_closed_form() {
        // L = mean((w - t)^2): dL/dw = 2 (w - t) / numel
        let mut ps = params64();
        let w = ps.add("w", Tensor::row_vector(&[1.0, 4.0]));
        let mut g = Graph::new(&ps);
        let wn = g.param(w);
        let t = g.constant(Tensor::row_vector(&[0.0, 1.0]));
        let loss = g.mse(wn, t);
        let mut store = GradStore::new();
        g.backward(loss, &mut store);
        let gw = store.get(w).unwrap();
        assert!((gw.data[0] - 2.0 * 1.0 / 2.0).abs() < 1e-12);
        assert!((gw.data[1] - 2.0 * 3.0 / 2.0).abs() < 1e-12);
    }

    #[test]
    fn frozen_params_receive_no_gradient() {
        let mut ps = params64();
        let w = ps.add("enc.w", Tensor::row_vector(&[1.0, 2.0]));
        let u = ps.add("head.w", Tensor::row_vector(&[3.0, 4.0]));
        ps.freeze_prefix("enc.");
        let mut g = Graph::new(&ps);
        let wn = g.param(w);
        let un = g.param(u);
        let s = g.mul(wn, un);
        let loss = g.mean_all(s);
        let mut store = GradStore::new();
        g.backward(loss, &mut store);
        assert!(store.get(w).is_none());
        assert!(store.get(u).is_some());
        assert_eq!(store.frozen_grad_norm(&ps), 0.0);
    }

    #[test]
    fn ce_loss_matches_manual_log_softmax() {
        let ps = params64();
        let mut g = Graph::new(&ps);
        let logits = g.constant(Tensor::from_rows(&[vec![1.0, 2.0, 0.5], vec![0.0, 0.0, 0.0]]));
        let loss = g.ce_loss(logits, &[1, 2]);
        let row0 = [1.0f64, 2.0, 0.5];
        let lse0 = row0.iter().map(|x| x.exp()).sum::<f64>().ln();
        let expect = ((lse0 - 2.0) + (3f64.ln() - 0.0)) / 2.0;
        assert!((g.scalar_value(loss) - expect).abs() < 1e-12);
    }

    #[test]
    fn bce_perfect_prediction_is_exactly_zero() {
        let ps = params64();
        let mut g = Graph::new(&ps);
        let target = Tensor::from_rows(&[vec![1.0, 0.0, 1.0, 0.0]]);
        let pred = g.constant(target.clone());
        let loss = g.bce_unit_loss(pred, target);
        assert_eq!(g.scalar_value(loss), 0.0);
    }

    #[test]
    fn embed_lookup_scatters_gradient() {
        let mut ps = params64();
        let table = ps.add("emb", Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 2.0]]));
        let mut g = Graph::new(&ps);
        let tn = g.param(table);
        let e = g.embed_lookup(tn, &[2, 0, 2]);
        let loss = g.sum_all(e);
        let mut store = GradStore::new();
        g.backward(loss, &mut store);
        let gt = store.get(table).unwrap();
        // row 2 used twice, row 0 once, row 1 never
        assert_eq!(gt.row(0), &[1.0, 1.0]);
        assert_eq!(gt.row(1), &[0.0, 0.0]);
        assert_eq!(gt.row(2), &[2.0, 2.0]);
    }

    #[test]
    fn backward_seeded_equals_chain_rule() {
        // Seeding an intermediate node with dL/dnode reproduces the full
        // backward pass gradient.
        let mut ps = params64();
        let w = ps.add("w", Tensor::row_vector(&[0.3, -0.7]));

        // Full pass: L = mean(tanh(w) * tanh(w))
        let mut g1 = Graph::new(&ps);
        let wn = g1.param(w);
        let t = g1.tanh(wn);
        let sq = g1.mul(t, t);
        let loss = g1.mean_all(sq);
        let mut full = GradStore::new();
        g1.backward(loss, &mut full);

        // Split pass: graph up to t, then seed with dL/dt = 2 t / n
        let mut g2 = Graph::new(&ps);
        let wn2 = g2.param(w);
        let t2 = g2.tanh(wn2);
        let tv = g2.value(t2).clone();
        let seed = tv.map(|y| 2.0 * y / tv.numel() as f64);
        let mut split = GradStore::new();
        g2.backward_seeded(t2, &seed, &mut split);

        let gf = full.get(w).unwrap();
        let gs = split.get(w).unwrap();
        for (a, b) in gf.data.iter().zip(&gs.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
