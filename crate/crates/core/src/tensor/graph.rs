use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::kernels::{gemm, MatRef};
use super::mask::AttentionLayout;
use super::params::{Gradients, ParamId, ParamStore};
use super::{Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Sparse per-row target distributions for [`Graph::soft_cross_entropy`].
///
/// Row `r` has explicit `(token, probability)` entries, an extra `uniform` mass
/// spread evenly over the whole vocabulary, and a `weight` multiplying its loss.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SoftTargets {
    offsets: Vec<usize>,
    ids: Vec<u32>,
    probs: Vec<f64>,
    uniform: Vec<f64>,
    weight: Vec<f64>,
}

impl SoftTargets {
    pub fn new() -> Self {
        SoftTargets {
            offsets: vec![0],
            ..Default::default()
        }
    }

    pub fn push_row<I>(&mut self, entries: I, uniform: f64, weight: f64)
    where
        I: IntoIterator<Item = (u32, f64)>,
    {
        for (id, p) in entries {
            self.ids.push(id);
            self.probs.push(p);
        }
        self.offsets.push(self.ids.len());
        self.uniform.push(uniform);
        self.weight.push(weight);
    }

    pub fn rows(&self) -> usize {
        self.uniform.len()
    }

    /// Multiplies every row weight by `factor`.
    pub fn scale_weights(&mut self, factor: f64) {
        self.weight.iter_mut().for_each(|w| *w *= factor);
    }

    fn entries(&self, row: usize) -> impl Iterator<Item = (u32, f64)> + '_ {
        let range = self.offsets[row]..self.offsets[row + 1];
        self.ids[range.clone()]
            .iter()
            .copied()
            .zip(self.probs[range].iter().copied())
    }
}

enum Value {
    Param(ParamId),
    Data(Tensor),
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    Embedding {
        table: Var,
        ids: Vec<u32>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: Arc<AttentionLayout>,
        heads: usize,
        probs: Vec<f64>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    SoftCrossEntropy {
        logits: Var,
        targets: Arc<SoftTargets>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// A tape of differentiable operations over the parameters of one store.
///
/// A graph in training mode owns a borrowed random generator used by dropout;
/// in evaluation mode dropout is the identity.
pub struct Graph<'a> {
    params: &'a ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> Graph<'a> {
    pub fn eval(params: &'a ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
            rng: None,
        }
    }

    pub fn train(params: &'a ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Graph {
            rng: Some(rng),
            ..Self::eval(params)
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn params(&self) -> &ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Param(id) => self.params.value(*id),
            Value::Data(t) => t,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Value::Data(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf node for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    /// Leaf node that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Value::Data(t),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(TensorError::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            1.0,
            MatRef::dense(self.value(a).data(), m, k),
            MatRef::dense(self.value(b).data(), k, n),
            0.0,
            &mut out,
            n,
            1,
        );
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    /// `[m, k] x [n, k]^T -> [m, n]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul_bt", a)?;
        let (n, k2) = self.dims2("matmul_bt", b)?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul_bt",
                lhs: vec![m, k],
                rhs: vec![n, k2],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            1.0,
            MatRef::dense(self.value(a).data(), m, k),
            MatRef::dense(self.value(b).data(), n, k).t(),
            0.0,
            &mut out,
            n,
            1,
        );
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMulBt(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::Shape {
                op: "add",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    /// Adds a `[n]` vector to every row of `[.., n]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.shape().len() != 1 || tr.numel() != ta.cols() {
            return Err(TensorError::Shape {
                op: "add_row",
                lhs: ta.shape().to_vec(),
                rhs: tr.shape().to_vec(),
            });
        }
        let c = ta.cols();
        let bias = tr.data();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bias[i % c])
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddRow(a, row), &[a, row]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * c).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Scale(a, c), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| x.max(0.0)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Relu(a), &[a])
    }

    /// Normalizes each row of `x` to zero mean and unit variance, then applies
    /// `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let c = tx.cols();
        if tg.numel() != c || tb.numel() != c {
            return Err(TensorError::Shape {
                op: "layer_norm",
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; rows * c];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * c];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..c {
                let h = (row[j] - mean) * s;
                xhat[r * c + j] = h;
                out[r * c + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.data().iter().any(|v| v.is_nan()) {
            return Err(TensorError::NonFinite { op: "softmax" });
        }
        let mut data = Vec::with_capacity(ta.numel());
        for r in 0..ta.rows() {
            data.extend(super::softmax_slice(ta.row(r)));
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Softmax(a), &[a]))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.data().iter().any(|v| v.is_nan()) {
            return Err(TensorError::NonFinite { op: "log_softmax" });
        }
        let mut data = Vec::with_capacity(ta.numel());
        for r in 0..ta.rows() {
            data.extend(super::log_softmax_slice(ta.row(r)));
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::LogSoftmax(a), &[a]))
    }

    /// Gathers rows of a `[vocab, dim]` table.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let (vocab, dim) = self.dims2("embedding", table)?;
        let tt = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id as usize >= vocab {
                return Err(TensorError::Vocab { id, size: vocab });
            }
            data.extend_from_slice(tt.row(id as usize));
        }
        let t = Tensor::new(vec![ids.len(), dim], data)?;
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Inverted dropout. Identity in eval mode or when `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        if rate <= 0.0 || self.rng.is_none() {
            return x;
        }
        let keep = 1.0 - rate;
        let n = self.value(x).numel();
        let rng = self.rng.as_mut().expect("training graph");
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let tx = self.value(x);
        let data = tx.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Dropout { x, mask }, &[x])
    }

    /// Fused scaled dot-product attention with `heads` heads over a ragged batch.
    ///
    /// `q` is `[q_rows, d]`, `k` and `v` are `[k_rows, d]`. Query rows not covered
    /// by any segment, and queries whose mask row allows no key, produce zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: Arc<AttentionLayout>,
        heads: usize,
    ) -> Result<Var> {
        let (q_rows, d) = self.dims2("attention", q)?;
        let (k_rows, dk) = self.dims2("attention", k)?;
        let (v_rows, dv) = self.dims2("attention", v)?;
        if dk != d || dv != d || v_rows != k_rows {
            return Err(TensorError::Shape {
                op: "attention",
                lhs: vec![q_rows, d],
                rhs: vec![k_rows, dk],
            });
        }
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Invalid(format!(
                "attention: width {d} not divisible by {heads} heads"
            )));
        }
        layout.validate(q_rows, k_rows)?;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut out = vec![0.0; q_rows * d];
        let mut probs = vec![0.0; layout.weight_count() * heads];
        let mut offset = 0;
        for seg in layout.segments() {
            let (tq, tk) = (seg.mask.query_len(), seg.mask.key_len());
            for h in 0..heads {
                let p = &mut probs[offset..offset + tq * tk];
                offset += tq * tk;
                let q_view = head_view(qd, seg.q_start, tq, d, h * dh, dh);
                let k_view = head_view(kd, seg.k_start, tk, d, h * dh, dh);
                gemm(scale, q_view, k_view.t(), 0.0, p, tk, 1);
                for i in 0..tq {
                    masked_softmax_row(&mut p[i * tk..(i + 1) * tk], seg.mask.row(i));
                }
                let v_view = head_view(vd, seg.k_start, tk, d, h * dh, dh);
                let o = &mut out[seg.q_start * d + h * dh..];
                gemm(1.0, MatRef::dense(p, tq, tk), v_view, 0.0, o, d, 1);
            }
        }
        let t = Tensor::new(vec![q_rows, d], out)?;
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                layout,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Gathers rows of `x` (any row may repeat).
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= tx.rows() {
                return Err(TensorError::Shape {
                    op: "select_rows",
                    lhs: tx.shape().to_vec(),
                    rhs: vec![r],
                });
            }
            data.extend_from_slice(tx.row(r));
        }
        let t = Tensor::new(vec![rows.len(), c], data)?;
        Ok(self.push(
            t,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// `sum_r weight_r * H(target_r, softmax(logits_r))` over the rows of `[rows, V]` logits.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: Arc<SoftTargets>) -> Result<Var> {
        let (rows, vocab) = self.dims2("soft_cross_entropy", logits)?;
        if targets.rows() != rows {
            return Err(TensorError::Shape {
                op: "soft_cross_entropy",
                lhs: vec![rows, vocab],
                rhs: vec![targets.rows()],
            });
        }
        let tl = self.value(logits);
        if tl.data().iter().any(|v| v.is_nan()) {
            return Err(TensorError::NonFinite {
                op: "soft_cross_entropy",
            });
        }
        let mut probs = Vec::with_capacity(rows * vocab);
        let mut total = 0.0;
        for r in 0..rows {
            let lp = super::log_softmax_slice(tl.row(r));
            let mut loss = 0.0;
            for (id, p) in targets.entries(r) {
                let id = id as usize;
                if id >= vocab {
                    return Err(TensorError::Vocab {
                        id: id as u32,
                        size: vocab,
                    });
                }
                loss -= p * lp[id];
            }
            let u = targets.uniform[r];
            if u != 0.0 {
                loss -= u / vocab as f64 * lp.iter().sum::<f64>();
            }
            total += targets.weight[r] * loss;
            probs.extend(lp.iter().map(|v| v.exp()));
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::SoftCrossEntropy {
                logits,
                targets,
                probs,
            },
            &[logits],
        ))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        Ok(self.reverse(loss, None)?.0)
    }

    /// Gradient of the scalar `loss` with respect to the intermediate `node`.
    pub fn grad_of(&self, loss: Var, node: Var) -> Result<Vec<f64>> {
        let (_, g) = self.reverse(loss, Some(node))?;
        Ok(g.unwrap_or_else(|| vec![0.0; self.value(node).numel()]))
    }

    fn reverse(&self, loss: Var, capture: Option<Var>) -> Result<(Gradients, Option<Vec<f64>>)> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Shape {
                op: "backward",
                lhs: self.shape(loss).to_vec(),
                rhs: vec![],
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::with_len(self.params.len());
        let mut captured = None;
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if capture.is_some_and(|c| c.0 == i) {
                captured = Some(g.clone());
            }
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(node, &g, &mut grads, &mut out);
        }
        Ok((out, captured))
    }

    fn backward_node(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        out: &mut Gradients,
    ) {
        match &node.op {
            Op::Leaf => {
                if let Value::Param(id) = node.value {
                    out.add(id, g);
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let gm = MatRef::dense(g, m, n);
                if let Some(ga) = self.grad_slot(grads, *a) {
                    gemm(1.0, gm, MatRef::dense(tb.data(), k, n).t(), 1.0, ga, k, 1);
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    gemm(1.0, MatRef::dense(ta.data(), m, k).t(), gm, 1.0, gb, n, 1);
                }
            }
            Op::MatMulBt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
                let gm = MatRef::dense(g, m, n);
                if let Some(ga) = self.grad_slot(grads, *a) {
                    gemm(1.0, gm, MatRef::dense(tb.data(), n, k), 1.0, ga, k, 1);
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    gemm(1.0, gm.t(), MatRef::dense(ta.data(), m, k), 1.0, gb, k, 1);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(ga) = self.grad_slot(grads, *v) {
                        add_into(ga, g);
                    }
                }
            }
            Op::AddRow(a, row) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gr) = self.grad_slot(grads, *row) {
                    let c = gr.len();
                    for (i, v) in g.iter().enumerate() {
                        gr[i % c] += v;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
                }
            }
            Op::Relu(a) => {
                let ta = self.value(*a);
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for ((x, y), v) in ga.iter_mut().zip(g).zip(ta.data()) {
                        if *v > 0.0 {
                            *x += y;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = self.value(*gamma).numel();
                let gamma_v = self.value(*gamma).data();
                let rows = rstd.len();
                if let Some(gg) = self.grad_slot(grads, *gamma) {
                    for r in 0..rows {
                        for j in 0..c {
                            gg[j] += g[r * c + j] * xhat[r * c + j];
                        }
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *beta) {
                    for r in 0..rows {
                        for j in 0..c {
                            gb[j] += g[r * c + j];
                        }
                    }
                }
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let mut dxhat = vec![0.0; c];
                    for r in 0..rows {
                        let base = r * c;
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..c {
                            dxhat[j] = g[base + j] * gamma_v[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xhat[base + j];
                        }
                        mean_d /= c as f64;
                        mean_dx /= c as f64;
                        for j in 0..c {
                            gx[base + j] +=
                                rstd[r] * (dxhat[j] - mean_d - xhat[base + j] * mean_dx);
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let y = self.data_of(node);
                let c = y.cols();
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &g[r * c..(r + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            ga[r * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let y = self.data_of(node);
                let c = y.cols();
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &g[r * c..(r + 1) * c];
                        let total: f64 = gr.iter().sum();
                        for j in 0..c {
                            ga[r * c + j] += gr[j] - yr[j].exp() * total;
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let dim = self.value(*table).cols();
                if let Some(gt) = self.grad_slot(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut gt[id as usize * dim..(id as usize + 1) * dim];
                        add_into(dst, &g[r * dim..(r + 1) * dim]);
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for ((a, b), m) in gx.iter_mut().zip(g).zip(mask) {
                        *a += b * m;
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                heads,
                probs,
            } => self.attention_backward(g, (*q, *k, *v), layout, *heads, probs, grads),
            Op::SelectRows { x, rows } => {
                let c = self.value(*x).cols();
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut gx[r * c..(r + 1) * c], &g[i * c..(i + 1) * c]);
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    let s = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|x| *x += s);
                }
            }
            Op::SoftCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let vocab = self.value(*logits).cols();
                if let Some(gl) = self.grad_slot(grads, *logits) {
                    for r in 0..targets.rows() {
                        let w = g[0] * targets.weight[r];
                        if w == 0.0 {
                            continue;
                        }
                        let u = targets.uniform[r];
                        let mut mass = u;
                        let row = &mut gl[r * vocab..(r + 1) * vocab];
                        for (id, p) in targets.entries(r) {
                            mass += p;
                            row[id as usize] -= w * p;
                        }
                        let pr = &probs[r * vocab..(r + 1) * vocab];
                        let spread = u / vocab as f64;
                        for j in 0..vocab {
                            row[j] += w * (mass * pr[j] - spread);
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[f64],
        (q, k, v): (Var, Var, Var),
        layout: &AttentionLayout,
        heads: usize,
        probs: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (tq_all, tk_all, tv_all) = (self.value(q), self.value(k), self.value(v));
        let d = tq_all.cols();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (need_q, need_k, need_v) = (
            self.nodes[q.0].requires_grad,
            self.nodes[k.0].requires_grad,
            self.nodes[v.0].requires_grad,
        );
        let mut gq = need_q.then(|| vec![0.0; tq_all.numel()]);
        let mut gk = need_k.then(|| vec![0.0; tk_all.numel()]);
        let mut gv = need_v.then(|| vec![0.0; tv_all.numel()]);
        let mut offset = 0;
        let mut dp = Vec::new();
        for seg in layout.segments() {
            let (tq, tk) = (seg.mask.query_len(), seg.mask.key_len());
            for h in 0..heads {
                let p = &probs[offset..offset + tq * tk];
                offset += tq * tk;
                let p_view = MatRef::dense(p, tq, tk);
                let go = head_view(g, seg.q_start, tq, d, h * dh, dh);
                if let Some(gv) = gv.as_mut() {
                    let dst = &mut gv[seg.k_start * d + h * dh..];
                    gemm(1.0, p_view.t(), go, 1.0, dst, d, 1);
                }
                if !(need_q || need_k) {
                    continue;
                }
                dp.clear();
                dp.resize(tq * tk, 0.0);
                let v_view = head_view(tv_all.data(), seg.k_start, tk, d, h * dh, dh);
                gemm(1.0, go, v_view.t(), 0.0, &mut dp, tk, 1);
                for i in 0..tq {
                    let pr = &p[i * tk..(i + 1) * tk];
                    let dr = &mut dp[i * tk..(i + 1) * tk];
                    let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                    for j in 0..tk {
                        dr[j] = pr[j] * (dr[j] - dot);
                    }
                }
                let ds = MatRef::dense(&dp, tq, tk);
                if let Some(gq) = gq.as_mut() {
                    let k_view = head_view(tk_all.data(), seg.k_start, tk, d, h * dh, dh);
                    let dst = &mut gq[seg.q_start * d + h * dh..];
                    gemm(scale, ds, k_view, 1.0, dst, d, 1);
                }
                if let Some(gk) = gk.as_mut() {
                    let q_view = head_view(tq_all.data(), seg.q_start, tq, d, h * dh, dh);
                    let dst = &mut gk[seg.k_start * d + h * dh..];
                    gemm(scale, ds.t(), q_view, 1.0, dst, d, 1);
                }
            }
        }
        for (var, local) in [(q, gq), (k, gk), (v, gv)] {
            if let (Some(local), Some(slot)) = (local, self.grad_slot(grads, var)) {
                add_into(slot, &local);
            }
        }
    }

    fn data_of<'n>(&'n self, node: &'n Node) -> &'n Tensor {
        match &node.value {
            Value::Param(id) => self.params.value(*id),
            Value::Data(t) => t,
        }
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut [f64]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.value(v).numel();
        Some(
            grads[v.0]
                .get_or_insert_with(|| vec![0.0; n])
                .as_mut_slice(),
        )
    }
}

fn head_view(
    data: &[f64],
    row_start: usize,
    rows: usize,
    d: usize,
    col: usize,
    dh: usize,
) -> MatRef<'_> {
    let start = row_start * d + col;
    MatRef {
        data: &data[start.min(data.len())..],
        rows,
        cols: dh,
        row_stride: d,
        col_stride: 1,
    }
}

fn masked_softmax_row(scores: &mut [f64], allowed: &[bool]) {
    let max = scores
        .iter()
        .zip(allowed)
        .filter(|(_, a)| **a)
        .map(|(s, _)| *s)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        scores.iter_mut().for_each(|s| *s = 0.0);
        return;
    }
    let mut sum = 0.0;
    for (s, a) in scores.iter_mut().zip(allowed) {
        *s = if *a { (*s - max).exp() } else { 0.0 };
        sum += *s;
    }
    scores.iter_mut().for_each(|s| *s /= sum);
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}
