//! The computation tape: records primitive applications in topological
//! order and replays them in reverse to accumulate gradients.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`]. Only valid for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(TensorId, TensorId),
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    /// Adds a `[1 x n]` bias row to every row of a `[m x n]` matrix.
    AddBiasRow(TensorId, TensorId),
    MulScalar(TensorId, f64),
    Sigmoid(TensorId),
    Tanh(TensorId),
    Log(TensorId),
    /// Softmax over the last axis (per row for 2-D input).
    Softmax(TensorId),
    /// Column-wise concatenation of equal-row 2-D tensors.
    ConcatCols(Vec<TensorId>),
    /// Column range `[start, stop)` of a 2-D tensor.
    SliceCols {
        input: TensorId,
        start: usize,
        stop: usize,
    },
    /// Row lookup: out[i, :] = table[rows[i], :].
    Gather {
        table: TensorId,
        rows: Vec<usize>,
    },
    Sum(TensorId),
    Mean(TensorId),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Ordered record of primitive applications; inputs always precede outputs.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node from position `len` onward. Handles issued after
    /// that point become invalid; callers must not retain them.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    /// Registers an input tensor. Gradients are accumulated for it only
    /// when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> TensorId {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> TensorId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient of the last `backward` target with respect to this node.
    /// Present for every `requires_grad` leaf after `backward` returns.
    pub fn grad(&self, id: TensorId) -> Option<Tensor> {
        let node = &self.nodes[id.0];
        node.grad.as_ref().map(|g| Tensor {
            shape: node.value.shape().to_vec(),
            data: g.clone(),
        })
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> TensorId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[TensorId]) -> TensorId {
        let rg = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        self.push(value, op, rg)
    }

    /// Standard matrix product of 2-D operands.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::Dimension {
                op: "matmul",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(av.data(), bv.data(), m, k, n, &mut out);
        let value = Tensor {
            shape: vec![m, n],
            data: out,
        };
        Ok(self.push_op(value, Op::Matmul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let value = self.elementwise(a, b, "add", |x, y| x + y)?;
        Ok(self.push_op(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let value = self.elementwise(a, b, "sub", |x, y| x - y)?;
        Ok(self.push_op(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let value = self.elementwise(a, b, "mul", |x, y| x * y)?;
        Ok(self.push_op(value, Op::Mul(a, b), &[a, b]))
    }

    fn elementwise(
        &self,
        a: TensorId,
        b: TensorId,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Dimension {
                op,
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(Tensor {
            shape: av.shape().to_vec(),
            data,
        })
    }

    /// `a + bias` where `bias` is a single row added to every row of `a`.
    /// The only broadcast the library supports.
    pub fn add_bias_row(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        let (av, bv) = (self.value(a), self.value(bias));
        let ok = av.shape().len() == 2
            && (bv.shape() == [1, av.shape()[1]] || bv.shape() == [av.shape()[1]]);
        if !ok {
            return Err(Error::Dimension {
                op: "add_bias_row",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let (m, n) = (av.shape()[0], av.shape()[1]);
        let mut data = av.data().to_vec();
        for r in 0..m {
            for c in 0..n {
                data[r * n + c] += bv.data()[c];
            }
        }
        let value = Tensor {
            shape: vec![m, n],
            data,
        };
        Ok(self.push_op(value, Op::AddBiasRow(a, bias), &[a, bias]))
    }

    pub fn mul_scalar(&mut self, a: TensorId, s: f64) -> TensorId {
        let av = self.value(a);
        let value = Tensor {
            shape: av.shape().to_vec(),
            data: av.data().iter().map(|&x| x * s).collect(),
        };
        self.push_op(value, Op::MulScalar(a, s), &[a])
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let av = self.value(a);
        let value = Tensor {
            shape: av.shape().to_vec(),
            data: av.data().iter().map(|&x| sigmoid(x)).collect(),
        };
        self.push_op(value, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        let av = self.value(a);
        let value = Tensor {
            shape: av.shape().to_vec(),
            data: av.data().iter().map(|&x| x.tanh()).collect(),
        };
        self.push_op(value, Op::Tanh(a), &[a])
    }

    pub fn log(&mut self, a: TensorId) -> TensorId {
        let av = self.value(a);
        let value = Tensor {
            shape: av.shape().to_vec(),
            data: av.data().iter().map(|&x| x.ln()).collect(),
        };
        self.push_op(value, Op::Log(a), &[a])
    }

    /// Softmax over the last axis, computed with max subtraction so large
    /// logits cannot overflow. Each slice sums to 1.
    pub fn softmax(&mut self, a: TensorId) -> TensorId {
        let av = self.value(a);
        let cols = av.cols();
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(cols) {
            softmax_row(row);
        }
        let value = Tensor {
            shape: av.shape().to_vec(),
            data,
        };
        self.push_op(value, Op::Softmax(a), &[a])
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        assert!(!parts.is_empty(), "concat_cols of zero tensors");
        let rows = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    left: self.value(parts[0]).shape().to_vec(),
                    right: v.shape().to_vec(),
                });
            }
            total += v.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor {
            shape: vec![rows, total],
            data,
        };
        Ok(self.push_op(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Column range `[start, stop)` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: TensorId, start: usize, stop: usize) -> Result<TensorId> {
        let av = self.value(a);
        let (rows, cols) = (av.rows(), av.cols());
        if start >= stop || stop > cols {
            return Err(Error::Validation(format!(
                "slice_cols [{start}, {stop}) out of range for {cols} columns"
            )));
        }
        let width = stop - start;
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&av.row(r)[start..stop]);
        }
        let value = Tensor {
            shape: vec![rows, width],
            data,
        };
        Ok(self.push_op(
            value,
            Op::SliceCols {
                input: a,
                start,
                stop,
            },
            &[a],
        ))
    }

    /// Embedding lookup: returns the table rows selected by `rows`.
    pub fn gather(&mut self, table: TensorId, rows: &[usize]) -> Result<TensorId> {
        let tv = self.value(table);
        let (v, e) = (tv.rows(), tv.cols());
        if let Some(&bad) = rows.iter().find(|&&r| r >= v) {
            return Err(Error::Validation(format!(
                "gather: row {bad} out of range for table with {v} rows"
            )));
        }
        let mut data = Vec::with_capacity(rows.len() * e);
        for &r in rows {
            data.extend_from_slice(tv.row(r));
        }
        let value = Tensor {
            shape: vec![rows.len(), e],
            data,
        };
        Ok(self.push_op(
            value,
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
            &[table],
        ))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let total: f64 = self.value(a).data().iter().sum();
        self.push_op(Tensor::scalar(total), Op::Sum(a), &[a])
    }

    /// Mean of all elements, as a one-element tensor.
    pub fn mean(&mut self, a: TensorId) -> TensorId {
        let v = self.value(a);
        let total: f64 = v.data().iter().sum();
        let value = Tensor::scalar(total / v.numel() as f64);
        self.push_op(value, Op::Mean(a), &[a])
    }

    /// Fills gradient buffers with d`loss`/d`node` for every node that
    /// requires gradients. `loss` must be a scalar. Any prior gradients on
    /// the tape are cleared first, so repeated calls are deterministic.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Validation(format!(
                "backward target must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            self.nodes[i].grad = Some(g);
        }

        // Disconnected leaves still get a gradient: exact zero.
        for node in &mut self.nodes {
            if node.requires_grad && matches!(node.op, Op::Leaf) && node.grad.is_none() {
                node.grad = Some(vec![0.0; node.value.numel()]);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.nodes[a.0].requires_grad {
                    let da = self.grad_buf(grads, a);
                    // dA[i,p] = sum_j G[i,j] * B[p,j]
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        let darow = &mut da[r * k..(r + 1) * k];
                        for p in 0..k {
                            let brow = bv.row(p);
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += grow[j] * brow[j];
                            }
                            darow[p] += acc;
                        }
                    }
                }
                if self.nodes[b.0].requires_grad {
                    let db = self.grad_buf(grads, b);
                    // dB[p,j] = sum_i A[i,p] * G[i,j]
                    for r in 0..m {
                        let arow = av.row(r);
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let a_rp = arow[p];
                            if a_rp == 0.0 {
                                continue;
                            }
                            let dbrow = &mut db[p * n..(p + 1) * n];
                            for j in 0..n {
                                dbrow[j] += a_rp * grow[j];
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, a, g.iter().copied());
                self.accumulate(grads, b, g.iter().copied());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, g.iter().copied());
                self.accumulate(grads, b, g.iter().map(|&x| -x));
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    let bv: Vec<f64> = self.nodes[b.0]
                        .value
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&x, &gg)| x * gg)
                        .collect();
                    self.accumulate(grads, a, bv.into_iter());
                }
                if self.nodes[b.0].requires_grad {
                    let av: Vec<f64> = self.nodes[a.0]
                        .value
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&x, &gg)| x * gg)
                        .collect();
                    self.accumulate(grads, b, av.into_iter());
                }
            }
            Op::AddBiasRow(a, bias) => {
                self.accumulate(grads, a, g.iter().copied());
                if self.nodes[bias.0].requires_grad {
                    let n = self.nodes[bias.0].value.numel();
                    let db = self.grad_buf(grads, bias);
                    for row in g.chunks(n) {
                        for (d, &gg) in db.iter_mut().zip(row) {
                            *d += gg;
                        }
                    }
                }
            }
            Op::MulScalar(a, s) => self.accumulate(grads, a, g.iter().map(|&x| x * s)),
            Op::Sigmoid(a) => {
                let y = self.nodes[i].value.data();
                self.accumulate(
                    grads,
                    a,
                    y.iter().zip(g).map(|(&y, &gg)| gg * y * (1.0 - y)),
                );
            }
            Op::Tanh(a) => {
                let y = self.nodes[i].value.data();
                self.accumulate(grads, a, y.iter().zip(g).map(|(&y, &gg)| gg * (1.0 - y * y)));
            }
            Op::Log(a) => {
                let x = self.nodes[a.0].value.data();
                self.accumulate(grads, a, x.iter().zip(g).map(|(&x, &gg)| gg / x));
            }
            Op::Softmax(a) => {
                if self.nodes[a.0].requires_grad {
                    let y = self.nodes[i].value.data();
                    let cols = self.nodes[i].value.cols();
                    let da = self.grad_buf(grads, a);
                    for r in 0..y.len() / cols {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(&y, &gg)| y * gg).sum();
                        let dr = &mut da[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let rows = self.nodes[i].value.rows();
                let total = self.nodes[i].value.cols();
                let mut offset = 0;
                for p in parts {
                    let w = self.nodes[p.0].value.cols();
                    if self.nodes[p.0].requires_grad {
                        let dp = self.grad_buf(grads, p);
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            let dst = &mut dp[r * w..(r + 1) * w];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols { input, start, stop } => {
                if self.nodes[input.0].requires_grad {
                    let cols = self.nodes[input.0].value.cols();
                    let rows = self.nodes[input.0].value.rows();
                    let w = stop - start;
                    let di = self.grad_buf(grads, input);
                    for r in 0..rows {
                        let src = &g[r * w..(r + 1) * w];
                        let dst = &mut di[r * cols + start..r * cols + stop];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Gather { table, rows } => {
                if self.nodes[table.0].requires_grad {
                    let e = self.nodes[table.0].value.cols();
                    let dt = self.grad_buf(grads, table);
                    for (b, &r) in rows.iter().enumerate() {
                        let src = &g[b * e..(b + 1) * e];
                        let dst = &mut dt[r * e..(r + 1) * e];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                let gg = g[0];
                self.accumulate(
                    grads,
                    a,
                    std::iter::repeat(gg).take(self.nodes[a.0].value.numel()),
                );
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.numel();
                let gg = g[0] / n as f64;
                self.accumulate(grads, a, std::iter::repeat(gg).take(n));
            }
        }
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], id: TensorId) -> &'g mut Vec<f64> {
        grads[id.0].get_or_insert_with(|| vec![0.0; self.nodes[id.0].value.numel()])
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Vec<f64>>],
        id: TensorId,
        contrib: impl Iterator<Item = f64>,
    ) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let buf = self.grad_buf(grads, id);
        for (d, s) in buf.iter_mut().zip(contrib) {
            *d += s;
        }
    }
}

/// `-sum(target * log_probs)` with a check that `target` is a distribution.
/// Differentiable with respect to `log_probs`; `target` is a plain value.
pub fn cross_entropy(tape: &mut Tape, target: &Tensor, log_probs: TensorId) -> Result<TensorId> {
    let lp = tape.value(log_probs);
    if target.shape() != lp.shape() {
        return Err(Error::Dimension {
            op: "cross_entropy",
            left: target.shape().to_vec(),
            right: lp.shape().to_vec(),
        });
    }
    let total: f64 = target.data().iter().sum();
    if (total - 1.0).abs() > 1e-6 || target.data().iter().any(|&p| p < 0.0) {
        return Err(Error::Validation(format!(
            "cross_entropy target must be a distribution (sum = {total})"
        )));
    }
    let t = tape.constant(target.clone());
    let prod = tape.mul(t, log_probs)?;
    let s = tape.sum(prod);
    Ok(tape.mul_scalar(s, -1.0))
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for r in 0..m {
        let arow = &a[r * k..(r + 1) * k];
        let orow = &mut out[r * n..(r + 1) * n];
        for (p, &a_rp) in arow.iter().enumerate() {
            if a_rp == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &b_pj) in orow.iter_mut().zip(brow) {
                *o += a_rp * b_pj;
            }
        }
    }
}
