//! Dense f64 tensors and a tape for reverse-mode automatic
//! differentiation.
//!
//! The engine is deliberately small: rank ≤ 2 values, the broadcast
//! patterns the message-passing models actually need (equal shapes,
//! `[1×c]` row bias, `[r×1]` per-row scalar, `[1×1]` scalar), and an
//! append-only tape whose nodes are topologically ordered by
//! construction. Everything is f64 so that equivariance tests can
//! assert tolerances near 1e-10.

use crate::error::{Error, Result};

/// A plain dense tensor: row-major f64 data plus an optional gradient
/// buffer of the same shape. Tensors not participating in a tape are
/// immutable values; gradients are accumulated (`+=`) by training code
/// and cleared with [`Tensor::zero_grad`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Contract(format!(
                "shape {:?} expects {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
            grad: None,
        }
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![1.0; n],
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
            grad: None,
        }
    }

    pub fn row(values: &[f64]) -> Self {
        Self {
            shape: vec![values.len()],
            data: values.to_vec(),
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::contract("rows of unequal length"));
            }
            data.extend_from_slice(row);
        }
        Self::new(vec![r, c], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Canonical 2-D view: scalars are 1×1, rank-1 values are row
    /// vectors.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.len() {
            0 => Ok((1, 1)),
            1 => Ok((1, self.shape[0])),
            2 => Ok((self.shape[0], self.shape[1])),
            _ => Err(Error::Contract(format!(
                "rank-{} tensors are unsupported (shape {:?})",
                self.shape.len(),
                self.shape
            ))),
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (_, cols) = self.dims2().expect("rank <= 2");
        self.data[r * cols + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let (_, cols) = self.dims2().expect("rank <= 2");
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Accumulate `g` into this tensor's gradient buffer (`+=`).
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(buf) => {
                for (a, b) in buf.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => self.grad = Some(g.to_vec()),
        }
    }

    /// In-place `data += scale * delta`, used by optimizers.
    pub fn apply_delta(&mut self, scale: f64, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.data.len());
        for (d, v) in self.data.iter_mut().zip(delta) {
            *d += scale * v;
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// rhs may broadcast as `[1×c]`, `[r×1]` or `[1×1]`.
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// rhs may broadcast as `[1×c]`, `[r×1]` or `[1×1]`.
    Mul(NodeId, NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    Swish(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Scale(NodeId, f64),
    SumAll(NodeId),
    MeanAll(NodeId),
    SumAxis(NodeId, usize),
    MeanAxis(NodeId, usize),
    GatherRows(NodeId, Vec<usize>),
    /// Rows of the input summed into `nseg` segments in input order.
    SegmentSum(NodeId, Vec<usize>),
    ConcatCols(Vec<NodeId>),
    /// Masked binary cross entropy against fixed 0/1 targets, summed.
    Bce {
        pred: NodeId,
        target: Vec<f64>,
        mask: Vec<f64>,
    },
    /// Same loss computed from logits: Σ mask·(softplus(ℓ) − t·ℓ).
    /// Gradients stay alive under saturation, unlike the probability
    /// form.
    BceLogits {
        logits: NodeId,
        target: Vec<f64>,
        mask: Vec<f64>,
    },
}

struct Node {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
}

/// Append-only record of a computation: parents of node k always have
/// index < k, so a single reverse sweep propagates gradients. One tape
/// is confined to one execution context.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// C[m×k] += G[m×n] · Bᵀ where B is k×n.
fn matmul_nt_acc(g: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (gv, bv) in grow.iter().zip(brow) {
                s += gv * bv;
            }
            orow[p] += s;
        }
    }
}

/// C[k×n] += Aᵀ · G where A is m×k and G is m×n.
fn matmul_tn_acc(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (ov, gv) in orow.iter_mut().zip(grow) {
                *ov += av * gv;
            }
        }
    }
}

/// Largest f64 strictly below 1, the saturation point for sigmoid.
const SIGMOID_MAX: f64 = 1.0 - f64::EPSILON / 2.0;

/// Logistic function, pinned to the open interval (0, 1) so that
/// probability outputs never saturate to exact 0/1 at extreme inputs.
fn sigmoid(x: f64) -> f64 {
    (1.0 / (1.0 + (-x).exp())).clamp(f64::MIN_POSITIVE, SIGMOID_MAX)
}

/// How the rhs of an elementwise op lines up against an `r×c` lhs.
#[derive(Clone, Copy, PartialEq)]
enum Broadcast {
    Equal,
    RowBias,   // [1×c]
    ColScalar, // [r×1]
    Scalar,    // [1×1]
}

fn classify_broadcast(
    op: &'static str,
    lr: usize,
    lc: usize,
    rr: usize,
    rc: usize,
) -> Result<Broadcast> {
    if (lr, lc) == (rr, rc) {
        Ok(Broadcast::Equal)
    } else if (rr, rc) == (1, lc) {
        Ok(Broadcast::RowBias)
    } else if (rr, rc) == (lr, 1) {
        Ok(Broadcast::ColScalar)
    } else if (rr, rc) == (1, 1) {
        Ok(Broadcast::Scalar)
    } else {
        Err(Error::Dim {
            op,
            lhs: vec![lr, lc],
            rhs: vec![rr, rc],
        })
    }
}

fn broadcast_index(b: Broadcast, i: usize, j: usize, cols: usize) -> usize {
    match b {
        Broadcast::Equal => i * cols + j,
        Broadcast::RowBias => j,
        Broadcast::ColScalar => i,
        Broadcast::Scalar => 0,
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<f64>, op: Op) -> NodeId {
        debug_assert_eq!(data.len(), rows * cols);
        let grad = vec![0.0; data.len()];
        self.nodes.push(Node {
            rows,
            cols,
            data,
            grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Record a tensor as a differentiable leaf.
    pub fn leaf(&mut self, t: &Tensor) -> Result<NodeId> {
        let (r, c) = t.dims2()?;
        Ok(self.push(r, c, t.data().to_vec(), Op::Leaf))
    }

    pub fn leaf_matrix(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<NodeId> {
        if data.len() != rows * cols {
            return Err(Error::contract("leaf data does not match shape"));
        }
        Ok(self.push(rows, cols, data, Op::Leaf))
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    pub fn dims(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    pub fn to_tensor(&self, id: NodeId) -> Tensor {
        let n = &self.nodes[id.0];
        Tensor::new(vec![n.rows, n.cols], n.data.clone()).expect("node shape is consistent")
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.dims(a);
        let (kb, n) = self.dims(b);
        if ka != kb {
            return Err(Error::Dim {
                op: "matmul",
                lhs: vec![m, ka],
                rhs: vec![kb, n],
            });
        }
        let data = matmul_raw(&self.nodes[a.0].data, &self.nodes[b.0].data, m, ka, n);
        Ok(self.push(m, n, data, Op::MatMul(a, b)))
    }

    fn elementwise2(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
        allow_broadcast: bool,
    ) -> Result<NodeId> {
        let (lr, lc) = self.dims(a);
        let (rr, rc) = self.dims(b);
        let bc = classify_broadcast(op_name, lr, lc, rr, rc)?;
        if !allow_broadcast && bc != Broadcast::Equal {
            return Err(Error::Dim {
                op: op_name,
                lhs: vec![lr, lc],
                rhs: vec![rr, rc],
            });
        }
        let mut data = Vec::with_capacity(lr * lc);
        for i in 0..lr {
            for j in 0..lc {
                let av = self.nodes[a.0].data[i * lc + j];
                let bv = self.nodes[b.0].data[broadcast_index(bc, i, j, lc)];
                data.push(f(av, bv));
            }
        }
        Ok(self.push(lr, lc, data, op))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise2("add", a, b, |x, y| x + y, Op::Add(a, b), true)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise2("sub", a, b, |x, y| x - y, Op::Sub(a, b), false)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise2("mul", a, b, |x, y| x * y, Op::Mul(a, b), true)
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let (r, c) = self.dims(a);
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| f(x)).collect();
        self.push(r, c, data, op)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    /// swish(x) = x·sigmoid(x)
    pub fn swish(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x * sigmoid(x), Op::Swish(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        self.unary(a, |x| x * k, Op::Scale(a, k))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        self.push(1, 1, vec![s], Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a.0].data.len() as f64;
        let s: f64 = self.nodes[a.0].data.iter().sum();
        self.push(1, 1, vec![s / n], Op::MeanAll(a))
    }

    fn reduce_axis(&mut self, a: NodeId, axis: usize, mean: bool) -> Result<NodeId> {
        let (r, c) = self.dims(a);
        if axis > 1 {
            return Err(Error::Dim {
                op: "reduce",
                lhs: vec![r, c],
                rhs: vec![axis],
            });
        }
        let src = &self.nodes[a.0].data;
        let (data, rows, cols) = if axis == 0 {
            let mut out = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    out[j] += src[i * c + j];
                }
            }
            if mean {
                for v in &mut out {
                    *v /= r as f64;
                }
            }
            (out, 1, c)
        } else {
            let mut out = vec![0.0; r];
            for i in 0..r {
                out[i] = src[i * c..(i + 1) * c].iter().sum();
                if mean {
                    out[i] /= c as f64;
                }
            }
            (out, r, 1)
        };
        let op = if mean {
            Op::MeanAxis(a, axis)
        } else {
            Op::SumAxis(a, axis)
        };
        Ok(self.push(rows, cols, data, op))
    }

    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.reduce_axis(a, axis, false)
    }

    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.reduce_axis(a, axis, true)
    }

    /// Select rows by index (repeats allowed).
    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        let (r, c) = self.dims(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::Contract(format!(
                "gather index {bad} out of range for {r} rows"
            )));
        }
        let src = &self.nodes[a.0].data;
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        Ok(self.push(indices.len(), c, data, Op::GatherRows(a, indices.to_vec())))
    }

    /// Sum row k of the input into segment `segments[k]`, accumulating
    /// in input-row order. Rows of the result with no contributing
    /// input rows are zero.
    pub fn segment_sum(&mut self, a: NodeId, segments: &[usize], nseg: usize) -> Result<NodeId> {
        let (r, c) = self.dims(a);
        if segments.len() != r {
            return Err(Error::Dim {
                op: "segment_sum",
                lhs: vec![r, c],
                rhs: vec![segments.len()],
            });
        }
        if let Some(&bad) = segments.iter().find(|&&s| s >= nseg) {
            return Err(Error::Contract(format!(
                "segment id {bad} out of range for {nseg} segments"
            )));
        }
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; nseg * c];
        for (row, &seg) in segments.iter().enumerate() {
            let srow = &src[row * c..(row + 1) * c];
            let drow = &mut data[seg * c..(seg + 1) * c];
            for (d, s) in drow.iter_mut().zip(srow) {
                *d += s;
            }
        }
        Ok(self.push(nseg, c, data, Op::SegmentSum(a, segments.to_vec())))
    }

    /// Horizontal concatenation of tensors with equal row counts.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols of zero tensors"));
        }
        let (rows, _) = self.dims(parts[0]);
        let mut total_cols = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != rows {
                return Err(Error::Dim {
                    op: "concat_cols",
                    lhs: vec![rows, self.dims(parts[0]).1],
                    rhs: vec![r, c],
                });
            }
            total_cols += c;
        }
        let mut data = Vec::with_capacity(rows * total_cols);
        for i in 0..rows {
            for &p in parts {
                let (_, c) = self.dims(p);
                data.extend_from_slice(&self.nodes[p.0].data[i * c..(i + 1) * c]);
            }
        }
        Ok(self.push(rows, total_cols, data, Op::ConcatCols(parts.to_vec())))
    }

    /// Summed binary cross entropy −Σ mask·[t·log p + (1−t)·log(1−p)]
    /// with probabilities clamped to [1e-12, 1−1e-12].
    pub fn bce_masked(&mut self, pred: NodeId, target: &[f64], mask: &[f64]) -> Result<NodeId> {
        let (r, c) = self.dims(pred);
        if target.len() != r * c || mask.len() != r * c {
            return Err(Error::Dim {
                op: "bce",
                lhs: vec![r, c],
                rhs: vec![target.len()],
            });
        }
        let mut total = 0.0;
        for ((&p, &t), &m) in self.nodes[pred.0].data.iter().zip(target).zip(mask) {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            total -= m * (t * p.ln() + (1.0 - t) * (1.0 - p).ln());
        }
        Ok(self.push(
            1,
            1,
            vec![total],
            Op::Bce {
                pred,
                target: target.to_vec(),
                mask: mask.to_vec(),
            },
        ))
    }

    /// Summed binary cross entropy of sigmoid(logits) against 0/1
    /// targets, evaluated in log space.
    pub fn bce_logits_masked(
        &mut self,
        logits: NodeId,
        target: &[f64],
        mask: &[f64],
    ) -> Result<NodeId> {
        let (r, c) = self.dims(logits);
        if target.len() != r * c || mask.len() != r * c {
            return Err(Error::Dim {
                op: "bce_logits",
                lhs: vec![r, c],
                rhs: vec![target.len()],
            });
        }
        let mut total = 0.0;
        for ((&l, &t), &m) in self.nodes[logits.0].data.iter().zip(target).zip(mask) {
            // softplus(ℓ) − t·ℓ, with softplus(ℓ) = max(ℓ,0) + ln(1+e^−|ℓ|)
            total += m * (l.max(0.0) + (-l.abs()).exp().ln_1p() - t * l);
        }
        Ok(self.push(
            1,
            1,
            vec![total],
            Op::BceLogits {
                logits,
                target: target.to_vec(),
                mask: mask.to_vec(),
            },
        ))
    }

    /// Reverse sweep from a scalar loss. Leaf gradients accumulate
    /// across calls; interior gradients are rebuilt each time.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let node = &self.nodes[loss.0];
        if node.rows * node.cols != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got {}x{}",
                node.rows, node.cols
            )));
        }
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.grad.fill(0.0);
            }
        }
        self.nodes[loss.0].grad[0] += 1.0;

        for id in (0..self.nodes.len()).rev() {
            let (parents, rest) = self.nodes.split_at_mut(id);
            let node = &rest[0];
            let go = &node.grad;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let m = node.rows;
                    let n = node.cols;
                    let k = parents[a.0].cols;
                    let da = {
                        let mut buf = vec![0.0; m * k];
                        matmul_nt_acc(go, &parents[b.0].data, m, n, k, &mut buf);
                        buf
                    };
                    let db = {
                        let mut buf = vec![0.0; k * n];
                        matmul_tn_acc(&parents[a.0].data, go, m, k, n, &mut buf);
                        buf
                    };
                    add_assign(&mut parents[a.0].grad, &da);
                    add_assign(&mut parents[b.0].grad, &db);
                }
                Op::Add(a, b) => {
                    let (da, db) = broadcast_pair_grads(go, node, parents, *a, *b, |_, _, g| {
                        (g, g)
                    });
                    add_assign(&mut parents[a.0].grad, &da);
                    add_assign(&mut parents[b.0].grad, &db);
                }
                Op::Sub(a, b) => {
                    let (da, db) = broadcast_pair_grads(go, node, parents, *a, *b, |_, _, g| {
                        (g, -g)
                    });
                    add_assign(&mut parents[a.0].grad, &da);
                    add_assign(&mut parents[b.0].grad, &db);
                }
                Op::Mul(a, b) => {
                    let (da, db) = broadcast_pair_grads(go, node, parents, *a, *b, |av, bv, g| {
                        (g * bv, g * av)
                    });
                    add_assign(&mut parents[a.0].grad, &da);
                    add_assign(&mut parents[b.0].grad, &db);
                }
                Op::Square(a) => {
                    let da: Vec<f64> = go
                        .iter()
                        .zip(&parents[a.0].data)
                        .map(|(g, x)| 2.0 * x * g)
                        .collect();
                    add_assign(&mut parents[a.0].grad, &da);
                }
                Op::Sqrt(a) => {
                    // Subgradient 0 at the origin keeps coincident
                    // points from poisoning training with NaNs.
                    let da: Vec<f64> = go
                        .iter()
                        .zip(&node.data)
                        .map(|(g, out)| if *out == 0.0 { 0.0 } else { g / (2.0 * out) })
                        .collect();
                    add_assign(&mut parents[a.0].grad, &da);
                }
                Op::Swish(a) => {
                    let da: Vec<f64> = go
                        .iter()
                        .zip(&parents[a.0].data)
                        .map(|(g, &x)| {
                            let s = sigmoid(x);
                            g * (s + x * s * (1.0 - s))
                        })
                        .collect();
                    add_assign(&mut parents[a.0].grad, &da);
                }
                Op::Sigmoid(a) => {
                    let da: Vec<f64> = go
                        .iter()
                        .zip(&node.data)
                        .map(|(g, s)| g * s * (1.0 - s))
                        .collect();
                    add_assign(&mut parents[a.0].grad, &da);
                }
                Op::Tanh(a) => {
                    let da: Vec<f64> = go
                        .iter()
                        .zip(&node.data)
                        .map(|(g, t)| g * (1.0 - t * t))
                        .collect();
                    add_assign(&mut parents[a.0].grad, &da);
                }
                Op::Scale(a, k) => {
                    let k = *k;
                    let da: Vec<f64> = go.iter().map(|g| g * k).collect();
                    add_assign(&mut parents[a.0].grad, &da);
                }
                Op::SumAll(a) => {
                    let g = go[0];
                    for v in parents[a.0].grad.iter_mut() {
                        *v += g;
                    }
                }
                Op::MeanAll(a) => {
                    let g = go[0] / parents[a.0].data.len() as f64;
                    for v in parents[a.0].grad.iter_mut() {
                        *v += g;
                    }
                }
                Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                    let (pr, pc) = (parents[a.0].rows, parents[a.0].cols);
                    let denom = if matches!(node.op, Op::MeanAxis(..)) {
                        if *axis == 0 {
                            pr as f64
                        } else {
                            pc as f64
                        }
                    } else {
                        1.0
                    };
                    let pg = &mut parents[a.0].grad;
                    for i in 0..pr {
                        for j in 0..pc {
                            let g = if *axis == 0 { go[j] } else { go[i] };
                            pg[i * pc + j] += g / denom;
                        }
                    }
                }
                Op::GatherRows(a, indices) => {
                    let c = node.cols;
                    let pg = &mut parents[a.0].grad;
                    for (row, &src) in indices.iter().enumerate() {
                        let grow = &go[row * c..(row + 1) * c];
                        let prow = &mut pg[src * c..(src + 1) * c];
                        for (p, g) in prow.iter_mut().zip(grow) {
                            *p += g;
                        }
                    }
                }
                Op::SegmentSum(a, segments) => {
                    let c = node.cols;
                    let pg = &mut parents[a.0].grad;
                    for (row, &seg) in segments.iter().enumerate() {
                        let grow = &go[seg * c..(seg + 1) * c];
                        let prow = &mut pg[row * c..(row + 1) * c];
                        for (p, g) in prow.iter_mut().zip(grow) {
                            *p += g;
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let rows = node.rows;
                    let total = node.cols;
                    let mut offset = 0;
                    for &p in parts {
                        let c = parents[p.0].cols;
                        let pg = &mut parents[p.0].grad;
                        for i in 0..rows {
                            let grow = &go[i * total + offset..i * total + offset + c];
                            let prow = &mut pg[i * c..(i + 1) * c];
                            for (pv, g) in prow.iter_mut().zip(grow) {
                                *pv += g;
                            }
                        }
                        offset += c;
                    }
                }
                Op::Bce { pred, target, mask } => {
                    let g = go[0];
                    let pdata = &parents[pred.0].data;
                    let dp: Vec<f64> = pdata
                        .iter()
                        .zip(target)
                        .zip(mask)
                        .map(|((&p, &t), &m)| {
                            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                            g * m * (-t / p + (1.0 - t) / (1.0 - p))
                        })
                        .collect();
                    add_assign(&mut parents[pred.0].grad, &dp);
                }
                Op::BceLogits { logits, target, mask } => {
                    let g = go[0];
                    let ldata = &parents[logits.0].data;
                    let dl: Vec<f64> = ldata
                        .iter()
                        .zip(target)
                        .zip(mask)
                        .map(|((&l, &t), &m)| g * m * (1.0 / (1.0 + (-l).exp()) - t))
                        .collect();
                    add_assign(&mut parents[logits.0].grad, &dl);
                }
            }
        }
        Ok(())
    }
}

const BCE_CLAMP: f64 = 1e-12;

fn add_assign(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Computes per-parent gradient buffers for a broadcast-aware binary
/// op, with `rule(a_val, b_val, upstream) -> (d_a, d_b)`.
fn broadcast_pair_grads(
    go: &[f64],
    node: &Node,
    parents: &[Node],
    a: NodeId,
    b: NodeId,
    rule: impl Fn(f64, f64, f64) -> (f64, f64),
) -> (Vec<f64>, Vec<f64>) {
    let (lr, lc) = (node.rows, node.cols);
    let (rr, rc) = (parents[b.0].rows, parents[b.0].cols);
    let bc = classify_broadcast("backward", lr, lc, rr, rc).expect("validated in forward");
    let mut da = vec![0.0; lr * lc];
    let mut db = vec![0.0; rr * rc];
    let adata = &parents[a.0].data;
    let bdata = &parents[b.0].data;
    for i in 0..lr {
        for j in 0..lc {
            let ai = i * lc + j;
            let bi = broadcast_index(bc, i, j, lc);
            let (ga, gb) = rule(adata[ai], bdata[bi], go[ai]);
            da[ai] += ga;
            db[bi] += gb;
        }
    }
    (da, db)
}

#[cfg(test)]
pub(crate) mod testutil {
    /// Central finite-difference gradient of `f` w.r.t. flat inputs,
    /// step 1e-5. `f` must rebuild its computation from scratch.
    pub fn finite_difference(f: &dyn Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        let mut probe = x.to_vec();
        for i in 0..x.len() {
            probe[i] = x[i] + step;
            let up = f(&probe);
            probe[i] = x[i] - step;
            let down = f(&probe);
            probe[i] = x[i];
            g[i] = (up - down) / (2.0 * step);
        }
        g
    }

    /// rel-tol 1e-4 with absolute floor 1e-8.
    pub fn grads_close(analytic: &[f64], numeric: &[f64]) -> bool {
        analytic.iter().zip(numeric).all(|(a, n)| {
            let denom = a.abs().max(n.abs()).max(1e-8);
            (a - n).abs() / denom <= 1e-4 || (a - n).abs() <= 1e-8
        })
    }
}

#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k) = a.dims2().unwrap();
        let (_, n) = b.dims2().unwrap();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.get(i, p) * b.get(p, j);
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i = tape
            .leaf(&Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap())
            .unwrap();
        let b = tape
            .leaf(&Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap())
            .unwrap();
        let c = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(c), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_row_by_column() {
        let mut tape = Tape::new();
        let a = tape
            .leaf(&Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap())
            .unwrap();
        let b = tape
            .leaf(&Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap())
            .unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[11.0]);
    }

    #[test]
    fn matmul_matches_naive_loop_bitwise() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(11);
        let a = Tensor::matrix(3, 4, (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let b = Tensor::matrix(4, 2, (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let mut tape = Tape::new();
        let ai = tape.leaf(&a).unwrap();
        let bi = tape.leaf(&b).unwrap();
        let c = tape.matmul(ai, bi).unwrap();
        assert_eq!(tape.value(c), naive_matmul(&a, &b).as_slice());
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(vec![2, 3])).unwrap();
        let b = tape.leaf(&Tensor::zeros(vec![2, 3])).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "message was: {msg}");
    }

    #[test]
    fn swish_and_sigmoid_fixed_points() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::row(&[0.0, 1.0])).unwrap();
        let sw = tape.swish(x);
        let sg = tape.sigmoid(x);
        assert_eq!(tape.value(sw)[0], 0.0);
        assert_eq!(tape.value(sg)[0], 0.5);
        // scalar oracle at x = 1
        let expected = 1.0 * (1.0 / (1.0 + (-1.0f64).exp()));
        assert!((tape.value(sw)[1] - expected).abs() < 1e-15);
    }

    #[test]
    fn reductions_match_examples() {
        let mut tape = Tape::new();
        let m = tape
            .leaf(&Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let s0 = tape.sum_axis(m, 0).unwrap();
        assert_eq!(tape.value(s0), &[4.0, 6.0]);
        let v = tape.leaf(&Tensor::row(&[2.0, 4.0])).unwrap();
        let mv = tape.mean_all(v);
        assert_eq!(tape.value(mv), &[3.0]);
    }

    #[test]
    fn sum_axis1_matches_naive_loop() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t = Tensor::matrix(5, 3, data.clone()).unwrap();
        let mut tape = Tape::new();
        let id = tape.leaf(&t).unwrap();
        let s = tape.sum_axis(id, 1).unwrap();
        for i in 0..5 {
            let expect = data[i * 3] + data[i * 3 + 1] + data[i * 3 + 2];
            assert_eq!(tape.value(s)[i], expect);
        }
    }

    #[test]
    fn axis_out_of_range_errors() {
        let mut tape = Tape::new();
        let m = tape.leaf(&Tensor::zeros(vec![2, 2])).unwrap();
        assert!(tape.sum_axis(m, 2).is_err());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let w = tape.leaf(&Tensor::row(&[1.5, -2.0, 0.5])).unwrap();
        let loss = tape.sum_all(w);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_square_sum() {
        let mut tape = Tape::new();
        let w = tape.leaf(&Tensor::row(&[1.0, 2.0])).unwrap();
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let w = tape.leaf(&Tensor::row(&[1.0, 2.0])).unwrap();
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let w = tape.leaf(&Tensor::row(&[3.0])).unwrap();
        let loss = tape.sum_all(w);
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w), &[2.0]);
    }

    /// A composite expression covering every op kind, evaluated from
    /// flat leaf data. Used as the finite-difference target.
    fn composite(params: &[f64]) -> (Tape, NodeId, NodeId, NodeId) {
        let mut tape = Tape::new();
        let a = tape.leaf_matrix(3, 2, params[..6].to_vec()).unwrap();
        let b = tape.leaf_matrix(2, 3, params[6..12].to_vec()).unwrap();
        let bias = tape.leaf_matrix(1, 3, params[12..15].to_vec()).unwrap();
        let mm = tape.matmul(a, b).unwrap();
        let biased = tape.add(mm, bias).unwrap();
        let sw = tape.swish(biased);
        let gathered = tape.gather_rows(sw, &[0, 2, 1, 0]).unwrap();
        let seg = tape.segment_sum(gathered, &[0, 1, 0, 1], 2).unwrap();
        let tanh = tape.tanh(seg);
        let sq = tape.square(tanh);
        let scaled = tape.scale(sq, 0.25);
        let rows = tape.sum_axis(scaled, 1).unwrap();
        let cat = tape.concat_cols(&[rows, rows]).unwrap();
        let sig = tape.sigmoid(cat);
        let loss = tape.mean_all(sig);
        (tape, a, b, loss)
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(5);
        let params: Vec<f64> = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (mut tape, a, b, loss) = composite(&params);
        tape.backward(loss).unwrap();
        let analytic: Vec<f64> = tape
            .grad(a)
            .iter()
            .chain(tape.grad(b))
            .copied()
            .collect();
        let f = |p: &[f64]| {
            let mut full = p.to_vec();
            full.extend_from_slice(&params[12..15]);
            let (t, _, _, l) = composite(&full);
            t.value(l)[0]
        };
        let numeric = finite_difference(&f, &params[..12], 1e-5);
        assert!(
            grads_close(&analytic, &numeric),
            "analytic {analytic:?} vs numeric {numeric:?}"
        );
    }

    #[test]
    fn tape_replay_is_deterministic() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(9);
        let params: Vec<f64> = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (mut t1, a1, _, l1) = composite(&params);
        let (mut t2, a2, _, l2) = composite(&params);
        t1.backward(l1).unwrap();
        t2.backward(l2).unwrap();
        assert_eq!(t1.value(l1), t2.value(l2));
        assert_eq!(t1.grad(a1), t2.grad(a2));
    }

    #[test]
    fn bce_matches_loop_oracle_and_gradcheck() {
        let preds = [0.9, 0.2, 0.5, 0.7];
        let target = [1.0, 0.0, 1.0, 0.0];
        let mask = [1.0, 1.0, 0.0, 1.0];
        let mut tape = Tape::new();
        let p = tape.leaf(&Tensor::row(&preds)).unwrap();
        let loss = tape.bce_masked(p, &target, &mask).unwrap();
        let mut expect = 0.0;
        for i in 0..4 {
            expect -= mask[i]
                * (target[i] * preds[i].ln() + (1.0 - target[i]) * (1.0 - preds[i]).ln());
        }
        assert!((tape.value(loss)[0] - expect).abs() < 1e-12);

        tape.backward(loss).unwrap();
        let f = |x: &[f64]| {
            let mut t = Tape::new();
            let p = t.leaf(&Tensor::row(x)).unwrap();
            let l = t.bce_masked(p, &target, &mask).unwrap();
            t.value(l)[0]
        };
        let numeric = finite_difference(&f, &preds, 1e-6);
        assert!(grads_close(tape.grad(p), &numeric));
    }

    #[test]
    fn bce_logits_matches_probability_form_and_gradcheck() {
        let logits = [2.3, -1.1, 0.0];
        let target = [1.0, 0.0, 1.0];
        let mask = [1.0; 5];
        let mut tape = Tape::new();
        let l = tape.leaf(&Tensor::row(&logits)).unwrap();
        let loss = tape.bce_logits_masked(l, &target, &mask[..3]).unwrap();

        let mut expect = 0.0;
        for i in 0..3 {
            let p = 1.0 / (1.0 + (-logits[i]).exp());
            expect -= target[i] * p.ln() + (1.0 - target[i]) * (1.0 - p).ln();
        }
        assert!((tape.value(loss)[0] - expect).abs() / expect.abs() < 1e-12);
        tape.backward(loss).unwrap();
        let g = tape.grad(l).to_vec();

        // gradients stay alive even where the probability form would
        // saturate and clamp
        let mut sat_tape = Tape::new();
        let sat = sat_tape.leaf(&Tensor::row(&[40.0, -35.0])).unwrap();
        let sat_loss = sat_tape
            .bce_logits_masked(sat, &[0.0, 1.0], &mask[..2])
            .unwrap();
        sat_tape.backward(sat_loss).unwrap();
        assert!((sat_tape.grad(sat)[0] - 1.0).abs() < 1e-9);
        assert!((sat_tape.grad(sat)[1] + 1.0).abs() < 1e-9);
        let f = |x: &[f64]| {
            let mut t = Tape::new();
            let l = t.leaf(&Tensor::row(x)).unwrap();
            let loss = t.bce_logits_masked(l, &target, &mask[..3]).unwrap();
            t.value(loss)[0]
        };
        let numeric = finite_difference(&f, &logits, 1e-6);
        assert!(grads_close(&g, &numeric));
    }

    proptest! {
        #[test]
        fn elementwise_grads_match_fd(seed in 0u64..200) {
            let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
            let rows = rng.gen_range(1..4usize);
            let cols = rng.gen_range(1..4usize);
            let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let scalar: Vec<f64> = (0..rows).map(|_| rng.gen_range(-2.0..2.0)).collect();

            let run = |p: &[f64]| -> (Tape, NodeId, NodeId) {
                let mut t = Tape::new();
                let x = t.leaf_matrix(rows, cols, p[..rows * cols].to_vec()).unwrap();
                let s = t.leaf_matrix(rows, 1, p[rows * cols..].to_vec()).unwrap();
                let scaled = t.mul(x, s).unwrap();
                let sw = t.swish(scaled);
                let sq = t.square(sw);
                let l = t.sum_all(sq);
                (t, x, l)
            };
            let mut flat = data.clone();
            flat.extend_from_slice(&scalar);
            let (mut tape, x, loss) = run(&flat);
            tape.backward(loss).unwrap();
            let f = |p: &[f64]| { let (t, _, l) = run(p); t.value(l)[0] };
            let numeric = finite_difference(&f, &flat, 1e-5);
            prop_assert!(grads_close(tape.grad(x), &numeric[..rows * cols]));
        }

        #[test]
        fn matmul_matches_oracle_small(m in 1usize..8, k in 1usize..8, n in 1usize..8, seed in 0u64..50) {
            let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
            let a = Tensor::matrix(m, k, (0..m * k).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
            let b = Tensor::matrix(k, n, (0..k * n).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
            let mut tape = Tape::new();
            let ai = tape.leaf(&a).unwrap();
            let bi = tape.leaf(&b).unwrap();
            let c = tape.matmul(ai, bi).unwrap();
            let oracle = naive_matmul(&a, &b);
            prop_assert_eq!(tape.value(c), oracle.as_slice());
        }
    }
}
