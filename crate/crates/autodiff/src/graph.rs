//! Append-only computation graph with reverse-mode differentiation.
//!
//! Every op evaluates eagerly and pushes a node holding its value and
//! whatever it needs for the backward pass. Node order is a topological
//! order, so `backward` is a single reverse sweep.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{AutodiffError, Result};
use crate::params::{ParamId, ParamSet};
use crate::tensor::{split_axis, Precision, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Max,
    Min,
}

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax(Var, usize),
    Log(Var),
    Exp(Var),
    Concat(Vec<Var>, usize),
    Slice {
        src: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Transpose(Var),
    Reduce {
        src: Var,
        kind: Reduce,
        axis: usize,
        argidx: Vec<usize>,
    },
    Gather(Var, Vec<usize>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    KlDiv {
        p: Var,
        q: Var,
        p_probs: Vec<f64>,
        q_probs: Vec<f64>,
    },
    LayerNorm {
        src: Var,
        gain: Var,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
    param: Option<(u64, usize)>,
}

/// Records executed ops and their values.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
    params: HashMap<(u64, usize), Var>,
}

/// Gradients of one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(Var, u64, usize)>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradients of every parameter leaf from `set` into the
    /// parameter's accumulator.
    pub fn accumulate_into(&self, set: &mut ParamSet) {
        let uid = set.uid();
        let tensors = set.tensors_mut();
        for &(var, set_uid, idx) in &self.params {
            if set_uid != uid {
                continue;
            }
            if let Some(g) = self.get(var) {
                let t = &mut tensors[idx];
                let acc = t.grad.get_or_insert_with(|| vec![0.0; g.len()]);
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    t.dims2().ok_or_else(|| AutodiffError::InvalidShape {
        shape: t.shape().to_vec(),
        reason: format!("{op} expects a 2-D tensor"),
    })
}

fn check_axis(op: &'static str, t: &Tensor, axis: usize) -> Result<()> {
    if axis >= t.rank() {
        return Err(AutodiffError::InvalidShape {
            shape: t.shape().to_vec(),
            reason: format!("{op}: axis {axis} out of range"),
        });
    }
    Ok(())
}

fn log_softmax_rows(logits: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    for (src, dst) in logits.chunks(cols).zip(out.chunks_mut(cols)) {
        let m = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + src.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
        for (d, &x) in dst.iter_mut().zip(src) {
            *d = x - lse;
        }
    }
    out
}

/// `c += a · b` for row-major `a: m×k`, `b: k×n`.
fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self {
            precision,
            ..Self::default()
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: &'static str, mut value: Tensor, node_op: Op, requires_grad: bool) -> Result<Var> {
        value.round_to(self.precision);
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op });
        }
        value.requires_grad = false;
        value.grad = None;
        self.nodes.push(Node {
            value: Arc::new(value),
            op: node_op,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push("constant", t, Op::Leaf, false)
            .expect("constant leaf must be finite")
    }

    /// A constant leaf sharing storage with the caller.
    pub fn constant_shared(&mut self, t: Arc<Tensor>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A free input leaf whose gradient can be read back from [`Gradients`].
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push("variable", t, Op::Leaf, true)
            .expect("variable leaf must be finite")
    }

    /// Leaf for a trainable parameter. Repeated calls for the same parameter
    /// return the same node, so shared weights accumulate one gradient.
    pub fn param(&mut self, set: &ParamSet, id: ParamId) -> Var {
        let key = (set.uid(), id.index());
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let src = set.get(id);
        let t = Tensor::new(src.shape(), src.data().to_vec()).expect("valid param");
        let v = self.push("param", t, Op::Leaf, src.requires_grad).expect("finite param");
        self.nodes[v.0].param = Some(key);
        self.params.insert(key, v);
        v
    }

    // ----- ops -----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = matrix("matmul", ta)?;
        let (k2, n) = matrix("matmul", tb)?;
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        self.push("matmul", Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg)
    }

    fn broadcast_binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape(), data)
        } else if tb.numel() == 1 {
            let y = tb.data()[0];
            Tensor::new(ta.shape(), ta.data().iter().map(|&x| f(x, y)).collect())
        } else if ta.numel() == 1 {
            let x = ta.data()[0];
            Tensor::new(tb.shape(), tb.data().iter().map(|&y| f(x, y)).collect())
        } else {
            Err(mismatch(op, ta, tb))
        }
    }

    /// Elementwise sum; one side may be a single-element tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        self.push("add", t, Op::Add(a, b), rg)
    }

    /// Elementwise product; one side may be a single-element tensor.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        self.push("mul", t, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape(), ta.data().iter().map(|x| x * c).collect())?;
        let rg = self.rg(&[a]);
        self.push("scale", t, Op::Scale(a, c), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape(), ta.data().iter().map(|&x| x.max(0.0)).collect())?;
        let rg = self.rg(&[a]);
        self.push("relu", t, Op::Relu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape(), ta.data().iter().map(|x| x.exp()).collect())?;
        let rg = self.rg(&[a]);
        self.push("exp", t, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if let Some(bad) = ta.data().iter().find(|&&x| x <= 0.0 || !x.is_finite()) {
            return Err(AutodiffError::Domain {
                op: "log",
                detail: format!("input {bad} is not a positive finite value"),
            });
        }
        let t = Tensor::new(ta.shape(), ta.data().iter().map(|x| x.ln()).collect())?;
        let rg = self.rg(&[a]);
        self.push("log", t, Op::Log(a), rg)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ta = self.value(a);
        check_axis("softmax", ta, axis)?;
        if !ta.is_finite() {
            return Err(AutodiffError::Domain {
                op: "softmax",
                detail: "non-finite input".into(),
            });
        }
        let (outer, n, inner) = split_axis(ta.shape(), axis);
        let x = ta.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let m = (0..n).map(|k| x[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for k in 0..n {
                    let e = (x[idx(k)] - m).exp();
                    out[idx(k)] = e;
                    s += e;
                }
                for k in 0..n {
                    out[idx(k)] /= s;
                }
            }
        }
        let t = Tensor::new(ta.shape(), out)?;
        let rg = self.rg(&[a]);
        self.push("softmax", t, Op::Softmax(a, axis), rg)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| AutodiffError::InvalidShape {
            shape: vec![],
            reason: "concat of nothing".into(),
        })?);
        check_axis("concat", first, axis)?;
        let base = first.shape().to_vec();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            let s = t.shape();
            let conforms = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !conforms {
                return Err(mismatch("concat", first, t));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let len = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let t = Tensor::new(&shape, out)?;
        let rg = self.rg(parts);
        self.push("concat", t, Op::Concat(parts.to_vec(), axis), rg)
    }

    /// `len` consecutive entries of `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        check_axis("slice", ta, axis)?;
        if len == 0 || start + len > ta.shape()[axis] {
            return Err(AutodiffError::InvalidShape {
                shape: ta.shape().to_vec(),
                reason: format!("slice [{start}, {}) out of range on axis {axis}", start + len),
            });
        }
        let (outer, n, inner) = split_axis(ta.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&ta.data()[base..base + len * inner]);
        }
        let mut shape = ta.shape().to_vec();
        shape[axis] = len;
        let t = Tensor::new(&shape, out)?;
        let rg = self.rg(&[a]);
        self.push("slice", t, Op::Slice { src: a, axis, start }, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshaped(shape)?;
        let rg = self.rg(&[a]);
        self.push("reshape", t, Op::Reshape(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = matrix("transpose", ta)?;
        let x = ta.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        let t = Tensor::new(&[c, r], out)?;
        let rg = self.rg(&[a]);
        self.push("transpose", t, Op::Transpose(a), rg)
    }

    /// Reduction along `axis`; the reduced extent is kept as 1.
    pub fn reduce(&mut self, a: Var, kind: Reduce, axis: usize) -> Result<Var> {
        let ta = self.value(a);
        check_axis("reduce", ta, axis)?;
        let (outer, n, inner) = split_axis(ta.shape(), axis);
        let x = ta.data();
        let mut out = vec![0.0; outer * inner];
        let mut argidx = Vec::new();
        if matches!(kind, Reduce::Max | Reduce::Min) {
            argidx = vec![0; outer * inner];
        }
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let slot = o * inner + i;
                match kind {
                    Reduce::Sum | Reduce::Mean => {
                        let s: f64 = (0..n).map(|k| x[idx(k)]).sum();
                        out[slot] = if kind == Reduce::Mean { s / n as f64 } else { s };
                    }
                    Reduce::Max | Reduce::Min => {
                        let mut best = 0;
                        for k in 1..n {
                            let better = if kind == Reduce::Max {
                                x[idx(k)] > x[idx(best)]
                            } else {
                                x[idx(k)] < x[idx(best)]
                            };
                            if better {
                                best = k;
                            }
                        }
                        out[slot] = x[idx(best)];
                        argidx[slot] = best;
                    }
                }
            }
        }
        let mut shape = ta.shape().to_vec();
        shape[axis] = 1;
        let t = Tensor::new(&shape, out)?;
        let rg = self.rg(&[a]);
        self.push("reduce", t, Op::Reduce { src: a, kind, axis, argidx }, rg)
    }

    /// Sum of every element, as a `[1]` tensor.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let flat = self.reshape(a, &[n])?;
        let s = self.reduce(flat, Reduce::Sum, 0)?;
        Ok(s)
    }

    /// Rows of a 2-D tensor selected by index (repeats allowed).
    pub fn gather(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = matrix("gather", ta)?;
        if rows.is_empty() {
            return Err(AutodiffError::InvalidShape {
                shape: ta.shape().to_vec(),
                reason: "gather of zero rows".into(),
            });
        }
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(AutodiffError::InvalidShape {
                    shape: ta.shape().to_vec(),
                    reason: format!("gather row {i} out of range"),
                });
            }
            out.extend_from_slice(ta.row(i));
        }
        let t = Tensor::new(&[rows.len(), c], out)?;
        let rg = self.rg(&[a]);
        self.push("gather", t, Op::Gather(a, rows.to_vec()), rg)
    }

    /// Mean over rows of `-log softmax(logits_i)[targets_i]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (r, c) = matrix("cross_entropy", tl)?;
        if targets.len() != r {
            return Err(AutodiffError::ShapeMismatch {
                op: "cross_entropy",
                left: tl.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(AutodiffError::Domain {
                op: "cross_entropy",
                detail: format!("target index {bad} >= {c} classes"),
            });
        }
        let logp = log_softmax_rows(tl.data(), c);
        let loss = -targets.iter().enumerate().map(|(i, &t)| logp[i * c + t]).sum::<f64>() / r as f64;
        let probs = logp.iter().map(|l| l.exp()).collect();
        let rg = self.rg(&[logits]);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Mean over rows of `KL(softmax(p_i) || softmax(q_i))`, in nats.
    pub fn kl_divergence(&mut self, p_logits: Var, q_logits: Var) -> Result<Var> {
        let (tp, tq) = (self.value(p_logits), self.value(q_logits));
        let (r, c) = matrix("kl_divergence", tp)?;
        if tp.shape() != tq.shape() {
            return Err(mismatch("kl_divergence", tp, tq));
        }
        let lp = log_softmax_rows(tp.data(), c);
        let lq = log_softmax_rows(tq.data(), c);
        let p_probs: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
        let q_probs: Vec<f64> = lq.iter().map(|l| l.exp()).collect();
        let mut kl = 0.0;
        for k in 0..r * c {
            if p_probs[k] > 0.0 {
                kl += p_probs[k] * (lp[k] - lq[k]);
            }
        }
        // Rounding can leave a tiny negative residue for identical inputs.
        let kl = (kl / r as f64).max(0.0);
        let rg = self.rg(&[p_logits, q_logits]);
        self.push(
            "kl_divergence",
            Tensor::scalar(kl),
            Op::KlDiv {
                p: p_logits,
                q: q_logits,
                p_probs,
                q_probs,
            },
            rg,
        )
    }

    /// Row-wise layer normalization of `x: n×d` scaled by `gain` (`d` values).
    pub fn layer_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (tx, tg) = (self.value(x), self.value(gain));
        let (r, c) = matrix("layer_norm", tx)?;
        if tg.numel() != c {
            return Err(mismatch("layer_norm", tx, tg));
        }
        let g = tg.data();
        let mut normed = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &tx.data()[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = inv;
            for j in 0..c {
                let nv = (row[j] - mean) * inv;
                normed[i * c + j] = nv;
                out[i * c + j] = nv * g[j];
            }
        }
        let t = Tensor::new(&[r, c], out)?;
        let rg = self.rg(&[x, gain]);
        self.push(
            "layer_norm",
            t,
            Op::LayerNorm {
                src: x,
                gain,
                normed,
                inv_std,
            },
            rg,
        )
    }

    // ----- backward -----

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(AutodiffError::ForeignVar);
        }
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(AutodiffError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(up) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &up, &mut grads);
            }
            grads[idx] = Some(up);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|(uid, p)| (Var(i), uid, p)))
            .collect();
        Ok(Gradients { grads, params })
    }

    /// Backward pass followed by accumulation into `set`.
    pub fn backward_into(&self, loss: Var, set: &mut ParamSet) -> Result<Gradients> {
        let g = self.backward(loss)?;
        g.accumulate_into(set);
        Ok(g)
    }

    fn propagate(&self, node: &Node, up: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| -> &Tensor { &self.nodes[v.0].value };
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let n = self.nodes[v.0].value.numel();
            let g = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(g);
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = ta.dims2().unwrap();
                let n = tb.dims2().unwrap().1;
                if wants(*a) {
                    // dA = dC · Bᵀ
                    acc(*a, &mut |g| {
                        for i in 0..m {
                            let urow = &up[i * n..(i + 1) * n];
                            for p in 0..k {
                                let brow = &tb.data()[p * n..(p + 1) * n];
                                g[i * k + p] += urow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    });
                }
                if wants(*b) {
                    // dB = Aᵀ · dC
                    acc(*b, &mut |g| {
                        for i in 0..m {
                            let urow = &up[i * n..(i + 1) * n];
                            for p in 0..k {
                                let aip = ta.data()[i * k + p];
                                if aip == 0.0 {
                                    continue;
                                }
                                let grow = &mut g[p * n..(p + 1) * n];
                                for (gj, &uj) in grow.iter_mut().zip(urow) {
                                    *gj += aip * uj;
                                }
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    let nv = val(v).numel();
                    acc(v, &mut |g| {
                        if nv == up.len() {
                            g.iter_mut().zip(up).for_each(|(x, u)| *x += u);
                        } else {
                            g[0] += up.iter().sum::<f64>();
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                for (v, other) in [(*a, tb), (*b, ta)] {
                    let nv = val(v).numel();
                    acc(v, &mut |g| {
                        let o = other.data();
                        let factor = |i: usize| if o.len() == 1 { o[0] } else { o[i] };
                        if nv == up.len() {
                            for i in 0..up.len() {
                                g[i] += up[i] * factor(i);
                            }
                        } else {
                            g[0] += (0..up.len()).map(|i| up[i] * factor(i)).sum::<f64>();
                        }
                    });
                }
            }
            Op::Scale(a, c) => acc(*a, &mut |g| g.iter_mut().zip(up).for_each(|(x, u)| *x += c * u)),
            Op::Relu(a) => {
                let x = val(*a).data();
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            g[i] += up[i];
                        }
                    }
                });
            }
            Op::Exp(a) => {
                let y = node.value.data();
                acc(*a, &mut |g| (0..g.len()).for_each(|i| g[i] += up[i] * y[i]));
            }
            Op::Log(a) => {
                let x = val(*a).data();
                acc(*a, &mut |g| (0..g.len()).for_each(|i| g[i] += up[i] / x[i]));
            }
            Op::Softmax(a, axis) => {
                let y = node.value.data();
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                acc(*a, &mut |g| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |k: usize| (o * n + k) * inner + i;
                            let dot: f64 = (0..n).map(|k| up[idx(k)] * y[idx(k)]).sum();
                            for k in 0..n {
                                g[idx(k)] += y[idx(k)] * (up[idx(k)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = split_axis(node.value.shape(), *axis);
                let total = node.value.shape()[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).shape()[*axis] * inner;
                    acc(p, &mut |g| {
                        for o in 0..outer {
                            let src = &up[o * total + offset..o * total + offset + len];
                            for (x, u) in g[o * len..(o + 1) * len].iter_mut().zip(src) {
                                *x += u;
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { src, axis, start } => {
                let (outer, n, inner) = split_axis(val(*src).shape(), *axis);
                let len = node.value.shape()[*axis] * inner;
                acc(*src, &mut |g| {
                    for o in 0..outer {
                        let base = (o * n + start) * inner;
                        for (x, u) in g[base..base + len].iter_mut().zip(&up[o * len..(o + 1) * len]) {
                            *x += u;
                        }
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |g| g.iter_mut().zip(up).for_each(|(x, u)| *x += u)),
            Op::Transpose(a) => {
                let (r, c) = val(*a).dims2().unwrap();
                acc(*a, &mut |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] += up[j * r + i];
                        }
                    }
                });
            }
            Op::Reduce {
                src,
                kind,
                axis,
                argidx,
            } => {
                let (outer, n, inner) = split_axis(val(*src).shape(), *axis);
                acc(*src, &mut |g| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let slot = o * inner + i;
                            let u = up[slot];
                            match kind {
                                Reduce::Sum => (0..n).for_each(|k| g[(o * n + k) * inner + i] += u),
                                Reduce::Mean => (0..n).for_each(|k| g[(o * n + k) * inner + i] += u / n as f64),
                                Reduce::Max | Reduce::Min => g[(o * n + argidx[slot]) * inner + i] += u,
                            }
                        }
                    }
                });
            }
            Op::Gather(a, rows) => {
                let c = val(*a).dims2().unwrap().1;
                acc(*a, &mut |g| {
                    for (k, &r) in rows.iter().enumerate() {
                        for j in 0..c {
                            g[r * c + j] += up[k * c + j];
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let r = targets.len();
                let c = probs.len() / r;
                let s = up[0] / r as f64;
                acc(*logits, &mut |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] += s * probs[i * c + j];
                        }
                        g[i * c + targets[i]] -= s;
                    }
                });
            }
            Op::KlDiv { p, q, p_probs, q_probs } => {
                let (r, c) = val(*p).dims2().unwrap();
                let s = up[0] / r as f64;
                acc(*q, &mut |g| {
                    for k in 0..r * c {
                        g[k] += s * (q_probs[k] - p_probs[k]);
                    }
                });
                acc(*p, &mut |g| {
                    for i in 0..r {
                        let row = i * c..(i + 1) * c;
                        let l: Vec<f64> = row
                            .clone()
                            .map(|k| {
                                if p_probs[k] > 0.0 {
                                    p_probs[k].ln() - q_probs[k].ln()
                                } else {
                                    0.0
                                }
                            })
                            .collect();
                        let mean_l: f64 = row.clone().zip(&l).map(|(k, lk)| p_probs[k] * lk).sum();
                        for (j, k) in row.enumerate() {
                            g[k] += s * p_probs[k] * (l[j] - mean_l);
                        }
                    }
                });
            }
            Op::LayerNorm {
                src,
                gain,
                normed,
                inv_std,
            } => {
                let (r, c) = val(*src).dims2().unwrap();
                let gv = val(*gain).data();
                acc(*gain, &mut |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[j] += up[i * c + j] * normed[i * c + j];
                        }
                    }
                });
                acc(*src, &mut |g| {
                    for i in 0..r {
                        let xh = &normed[i * c..(i + 1) * c];
                        let dxh: Vec<f64> = (0..c).map(|j| up[i * c + j] * gv[j]).collect();
                        let s1: f64 = dxh.iter().sum();
                        let s2: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            g[i * c + j] += inv_std[i] / c as f64 * (c as f64 * dxh[j] - s1 - xh[j] * s2);
                        }
                    }
                });
            }
        }
    }
}
