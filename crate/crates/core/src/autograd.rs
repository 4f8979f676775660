//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation evaluates eagerly and appends one node to the [`Tape`].
//! Node order is execution order, so [`Tape::backward`] walks the node list
//! from the loss back to the first node and visits each op exactly once.
//! Outputs are checked for NaN/Inf as they are produced.

use std::collections::HashMap;

use rand::Rng;

use crate::kernels::{gemm, MatMut, MatRef};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Tensor, TensorError, TensorResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Dropout(Var, Vec<f64>),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Transpose(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<f64>,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    Gather {
        x: Var,
        rows: Vec<usize>,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
    },
    RowDistance {
        a: Var,
        b: Var,
        squared: bool,
        dist: Vec<f64>,
    },
    RowNormalize {
        x: Var,
        norms: Vec<f64>,
    },
    StopGradient(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Dropout(..) => "dropout",
            Op::MatMul(..) => "matmul",
            Op::Linear { .. } => "linear",
            Op::Transpose(_) => "transpose",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Attention { .. } => "attention",
            Op::Gather { .. } => "gather_rows",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::BceWithLogits { .. } => "bce_with_logits",
            Op::RowDistance { .. } => "row_distance",
            Op::RowNormalize { .. } => "row_normalize",
            Op::StopGradient(_) => "stop_gradient",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Dropout(a, _)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::StopGradient(a) => vec![*a],
            Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::Gather { x, .. } => vec![*x],
            Op::SoftmaxCrossEntropy { logits, .. } | Op::BceWithLogits { logits, .. } => {
                vec![*logits]
            }
            Op::RowDistance { a, b, .. } => vec![*a, *b],
            Op::RowNormalize { x, .. } => vec![*x],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

/// Record of executed operations. One tape serves one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    frozen: HashMap<ParamId, Var>,
    freeze_params: bool,
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf for a stored parameter; one leaf per parameter per tape.
    ///
    /// While parameters are frozen (see [`Tape::set_freeze_params`]) a separate,
    /// non-differentiable leaf is returned instead.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let frozen = self.freeze_params;
        let cached = if frozen {
            self.frozen.get(&id)
        } else {
            self.params.get(&id)
        };
        if let Some(v) = cached {
            return *v;
        }
        let v = self.leaf(store.get(id).clone(), !frozen);
        if frozen {
            self.frozen.insert(id, v);
        } else {
            self.params.insert(id, v);
        }
        v
    }

    /// Toggles whether [`Tape::param`] hands out frozen leaves; returns the previous setting.
    pub fn set_freeze_params(&mut self, freeze: bool) -> bool {
        std::mem::replace(&mut self.freeze_params, freeze)
    }

    fn push(&mut self, value: Tensor, op: Op) -> TensorResult<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = match op {
            Op::StopGradient(_) | Op::Leaf => false,
            _ => op.inputs().iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> TensorResult<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
            Tensor::new(ta.shape().to_vec(), data)
        } else if tb.is_scalar() {
            let y = tb.item();
            let data = ta.data().iter().map(|x| f(*x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)
        } else if ta.is_scalar() {
            let x = ta.item();
            let data = tb.data().iter().map(|y| f(x, *y)).collect();
            Tensor::new(tb.shape().to_vec(), data)
        } else {
            Err(shape_err(name, ta.shape(), tb.shape()))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        self.push(t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        self.push(t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        self.push(t, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> TensorResult<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * factor).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(t, Op::Scale(a, factor))
    }

    pub fn relu(&mut self, a: Var) -> TensorResult<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x.max(0.0)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(t, Op::Relu(a))
    }

    /// Inverted dropout. Returns `a` unchanged outside training or when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        p: f64,
        train: bool,
        rng: &mut R,
    ) -> TensorResult<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Invalid {
                op: "dropout",
                msg: format!("probability {p} outside [0, 1)"),
            });
        }
        if !train || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let ta = self.value(a);
        let mask: Vec<f64> = (0..ta.numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = ta.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(t, Op::Dropout(a, mask))
    }

    /// Plain 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            MatRef::dense(ta.data(), m, k),
            MatRef::dense(tb.data(), k, n),
            0.0,
            MatMut::dense(&mut out, m, n),
        );
        let t = Tensor::new(vec![m, n], out)?;
        self.push(t, Op::MatMul(a, b))
    }

    /// `x·w + b` over the last dimension of `x` (leading dimensions are rows).
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> TensorResult<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tw.shape().len() != 2 || tx.shape().is_empty() || tx.last_dim() != tw.shape()[0] {
            return Err(shape_err("linear", tx.shape(), tw.shape()));
        }
        let (rows, k, n) = (tx.rows(), tw.shape()[0], tw.shape()[1]);
        let mut out = vec![0.0; rows * n];
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.shape() != [n] {
                return Err(shape_err("linear", tw.shape(), tb.shape()));
            }
            for r in 0..rows {
                out[r * n..(r + 1) * n].copy_from_slice(tb.data());
            }
        }
        gemm(
            MatRef::dense(tx.data(), rows, k),
            MatRef::dense(tw.data(), k, n),
            1.0,
            MatMut::dense(&mut out, rows, n),
        );
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().expect("non-empty") = n;
        let t = Tensor::new(shape, out)?;
        self.push(t, Op::Linear { x, w, b })
    }

    pub fn transpose(&mut self, a: Var) -> TensorResult<Var> {
        let ta = self.value(a);
        if ta.shape().len() != 2 {
            return Err(TensorError::Invalid {
                op: "transpose",
                msg: format!("expected 2-D tensor, got {:?}", ta.shape()),
            });
        }
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = ta.data()[i * n + j];
            }
        }
        let t = Tensor::new(vec![n, m], out)?;
        self.push(t, Op::Transpose(a))
    }

    /// Per-row normalization over the last dimension followed by `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> TensorResult<Var> {
        let tx = self.value(x);
        let d = tx.last_dim();
        for p in [gain, bias] {
            let tp = self.value(p);
            if tp.shape() != [d] {
                return Err(shape_err("layer_norm", tx.shape(), tp.shape()));
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = tx.rows();
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Multi-head scaled dot-product attention over `[batch, seq, d]` inputs.
    /// `key_mask[b * seq + j]` enables key `j` of example `b`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        key_mask: &[bool],
        heads: usize,
    ) -> TensorResult<Var> {
        let tq = self.value(q);
        let shape = tq.shape().to_vec();
        for other in [k, v] {
            if self.value(other).shape() != shape.as_slice() {
                return Err(shape_err("attention", &shape, self.value(other).shape()));
            }
        }
        if shape.len() != 3 {
            return Err(TensorError::Invalid {
                op: "attention",
                msg: format!("expected [batch, seq, d], got {shape:?}"),
            });
        }
        let (batch, seq, d) = (shape[0], shape[1], shape[2]);
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Invalid {
                op: "attention",
                msg: format!("{heads} heads do not divide width {d}"),
            });
        }
        if key_mask.len() != batch * seq {
            return Err(shape_err("attention", &[batch * seq], &[key_mask.len()]));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (tq.data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; batch * seq * d];
        for b in 0..batch {
            let mask = &key_mask[b * seq..(b + 1) * seq];
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                gemm(
                    MatRef::block(qd, d, b * seq, h * dh, seq, dh),
                    MatRef::block(kd, d, b * seq, h * dh, seq, dh).t(),
                    0.0,
                    MatMut::dense(p, seq, seq),
                );
                for i in 0..seq {
                    let row = &mut p[i * seq..(i + 1) * seq];
                    let max = row
                        .iter()
                        .zip(mask)
                        .filter(|(_, m)| **m)
                        .map(|(s, _)| *s)
                        .fold(f64::NEG_INFINITY, f64::max);
                    if max == f64::NEG_INFINITY {
                        row.fill(0.0);
                        continue;
                    }
                    let mut total = 0.0;
                    for (s, m) in row.iter_mut().zip(mask) {
                        *s = if *m { ((*s - max) * scale).exp() } else { 0.0 };
                        total += *s;
                    }
                    for s in row.iter_mut() {
                        *s /= total;
                    }
                }
                gemm(
                    MatRef::dense(p, seq, seq),
                    MatRef::block(vd, d, b * seq, h * dh, seq, dh),
                    0.0,
                    MatMut::block(&mut out, d, b * seq, h * dh, seq, dh),
                );
            }
        }
        let t = Tensor::new(shape, out)?;
        self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                probs,
                batch,
                seq,
                heads,
            },
        )
    }

    /// Selects rows (over the last dimension) into a `[rows.len(), d]` tensor.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> TensorResult<Var> {
        let tx = self.value(x);
        let (n, d) = (tx.rows(), tx.last_dim());
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: r,
                    size: n,
                });
            }
            out.extend_from_slice(tx.row(r));
        }
        let t = Tensor::new(vec![rows.len(), d], out)?;
        self.push(
            t,
            Op::Gather {
                x,
                rows: rows.to_vec(),
            },
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> TensorResult<Var> {
        let t = self.value(a).reshape(shape)?;
        self.push(t, Op::Reshape(a))
    }

    pub fn sum(&mut self, a: Var) -> TensorResult<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> TensorResult<Var> {
        let ta = self.value(a);
        if ta.numel() == 0 {
            return Err(TensorError::Invalid {
                op: "mean",
                msg: "empty tensor".into(),
            });
        }
        let s = ta.data().iter().sum::<f64>() / ta.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> TensorResult<Var> {
        let tl = self.value(logits);
        if tl.shape().len() != 2 || tl.shape()[0] != targets.len() {
            return Err(shape_err("softmax_cross_entropy", tl.shape(), &[targets.len()]));
        }
        let (n, vocab) = (tl.shape()[0], tl.shape()[1]);
        if n == 0 {
            return Err(TensorError::Invalid {
                op: "softmax_cross_entropy",
                msg: "no rows".into(),
            });
        }
        let mut probs = vec![0.0; n * vocab];
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= vocab {
                return Err(TensorError::Index {
                    op: "softmax_cross_entropy",
                    index: t,
                    size: vocab,
                });
            }
            let row = tl.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let log_total = total.ln();
            for (j, x) in row.iter().enumerate() {
                probs[r * vocab + j] = (x - max).exp() / total;
            }
            loss -= row[t] - max - log_total;
        }
        self.push(
            Tensor::scalar(loss / n as f64),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> TensorResult<Var> {
        let tl = self.value(logits);
        if tl.numel() != targets.len() || targets.is_empty() {
            return Err(shape_err("bce_with_logits", tl.shape(), &[targets.len()]));
        }
        let loss: f64 = tl
            .data()
            .iter()
            .zip(targets)
            .map(|(x, t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .sum();
        self.push(
            Tensor::scalar(loss / targets.len() as f64),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
        )
    }

    /// Euclidean (or squared Euclidean) distance between matching rows.
    pub fn row_distance(&mut self, a: Var, b: Var, squared: bool) -> TensorResult<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("row_distance", ta.shape(), tb.shape()));
        }
        let rows = ta.rows();
        let mut dist = Vec::with_capacity(rows);
        for r in 0..rows {
            let ss: f64 = ta
                .row(r)
                .iter()
                .zip(tb.row(r))
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            dist.push(if squared { ss } else { ss.sqrt() });
        }
        let mut shape = ta.shape().to_vec();
        shape.pop();
        let t = Tensor::new(shape, dist.clone())?;
        self.push(t, Op::RowDistance { a, b, squared, dist })
    }

    /// `‖a − b‖₂` over all elements, as a scalar.
    pub fn l2_distance(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(shape_err("l2_distance", &sa, &sb));
        }
        let n = self.value(a).numel();
        let ra = self.reshape(a, &[1, n])?;
        let rb = self.reshape(b, &[1, n])?;
        let d = self.row_distance(ra, rb, false)?;
        self.reshape(d, &[])
    }

    /// Scales each row to unit Euclidean norm.
    pub fn row_normalize(&mut self, x: Var) -> TensorResult<Var> {
        let tx = self.value(x);
        let (rows, d) = (tx.rows(), tx.last_dim());
        let mut norms = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(tx.numel());
        for r in 0..rows {
            let row = tx.row(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            norms.push(n);
            out.extend(row.iter().map(|v| v / n));
        }
        debug_assert_eq!(out.len(), rows * d);
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        self.push(t, Op::RowNormalize { x, norms })
    }

    /// Identity forward; blocks all gradient flow to `x`.
    pub fn stop_gradient(&mut self, x: Var) -> TensorResult<Var> {
        let t = self.value(x).clone();
        self.push(t, Op::StopGradient(x))
    }

    /// Reverse pass from a scalar `loss`. The tape is left untouched, so a
    /// second call yields identical gradients.
    pub fn backward(&self, loss: Var) -> TensorResult<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(TensorError::NonFinite {
                        op: self.nodes[i].op.name(),
                    });
                }
            }
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|g| {
                    Tensor::new(self.nodes[i].value.shape().to_vec(), g).expect("gradient shape")
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    /// Gradients for every trainable parameter leaf; unused leaves get zeros.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = self
            .params
            .iter()
            .map(|(id, v)| {
                let g = grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.shape(*v)));
                (*id, g)
            })
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[v.0].requires_grad {
                let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
                f(buf);
            }
        };
        let val = |v: Var| &nodes[v.0].value;

        match &node.op {
            Op::Leaf | Op::StopGradient(_) => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                for (v, s) in [(*a, 1.0), (*b, sign)] {
                    let broadcast = val(v).numel() != g.len();
                    acc(v, &mut |buf| {
                        if broadcast {
                            buf[0] += s * g.iter().sum::<f64>();
                        } else {
                            for (d, x) in buf.iter_mut().zip(g) {
                                *d += s * x;
                            }
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    let ov = val(other).data();
                    let broadcast = val(v).numel() != g.len();
                    acc(v, &mut |buf| {
                        if broadcast {
                            // v is the broadcast scalar: d/dv = Σ g·other
                            buf[0] += g.iter().zip(ov).map(|(x, o)| x * o).sum::<f64>();
                        } else if ov.len() == 1 {
                            for (d, x) in buf.iter_mut().zip(g) {
                                *d += x * ov[0];
                            }
                        } else {
                            for ((d, x), o) in buf.iter_mut().zip(g).zip(ov) {
                                *d += x * o;
                            }
                        }
                    });
                }
            }
            Op::Scale(a, f) => acc(*a, &mut |buf| {
                for (d, x) in buf.iter_mut().zip(g) {
                    *d += f * x;
                }
            }),
            Op::Relu(a) => {
                let xv = val(*a).data();
                acc(*a, &mut |buf| {
                    for ((d, x), inp) in buf.iter_mut().zip(g).zip(xv) {
                        if *inp > 0.0 {
                            *d += x;
                        }
                    }
                })
            }
            Op::Dropout(a, mask) => acc(*a, &mut |buf| {
                for ((d, x), m) in buf.iter_mut().zip(g).zip(mask) {
                    *d += x * m;
                }
            }),
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let dc = MatRef::dense(g, m, n);
                acc(*a, &mut |buf| {
                    gemm(dc, MatRef::dense(tb.data(), k, n).t(), 1.0, MatMut::dense(buf, m, k))
                });
                acc(*b, &mut |buf| {
                    gemm(MatRef::dense(ta.data(), m, k).t(), dc, 1.0, MatMut::dense(buf, k, n))
                });
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (val(*x), val(*w));
                let (rows, k, n) = (tx.rows(), tw.shape()[0], tw.shape()[1]);
                let dy = MatRef::dense(g, rows, n);
                acc(*x, &mut |buf| {
                    gemm(dy, MatRef::dense(tw.data(), k, n).t(), 1.0, MatMut::dense(buf, rows, k))
                });
                acc(*w, &mut |buf| {
                    gemm(MatRef::dense(tx.data(), rows, k).t(), dy, 1.0, MatMut::dense(buf, k, n))
                });
                if let Some(b) = b {
                    acc(*b, &mut |buf| {
                        for r in 0..rows {
                            add_into(buf, &g[r * n..(r + 1) * n]);
                        }
                    });
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (val(*a).shape()[0], val(*a).shape()[1]);
                acc(*a, &mut |buf| {
                    for i in 0..m {
                        for j in 0..n {
                            buf[i * n + j] += g[j * m + i];
                        }
                    }
                })
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = val(*gain).numel();
                let rows = inv_std.len();
                let gv = val(*gain).data();
                if wants(*x) {
                    acc(*x, &mut |buf| {
                        for r in 0..rows {
                            let gr = &g[r * d..(r + 1) * d];
                            let hr = &xhat[r * d..(r + 1) * d];
                            let mut mean_dh = 0.0;
                            let mut mean_dh_h = 0.0;
                            for j in 0..d {
                                let dh = gr[j] * gv[j];
                                mean_dh += dh;
                                mean_dh_h += dh * hr[j];
                            }
                            mean_dh /= d as f64;
                            mean_dh_h /= d as f64;
                            for j in 0..d {
                                let dh = gr[j] * gv[j];
                                buf[r * d + j] += inv_std[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                            }
                        }
                    });
                }
                acc(*gain, &mut |buf| {
                    for r in 0..rows {
                        for j in 0..d {
                            buf[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                acc(*bias, &mut |buf| {
                    for r in 0..rows {
                        add_into(buf, &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                probs,
                batch,
                seq,
                heads,
            } => {
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let d = val(*q).last_dim();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (val(*q).data(), val(*k).data(), val(*v).data());
                let mut dq = vec![0.0; qd.len()];
                let mut dk = vec![0.0; kd.len()];
                let mut dv = vec![0.0; vd.len()];
                let mut dp = vec![0.0; seq * seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                        let dout = MatRef::block(g, d, b * seq, h * dh, seq, dh);
                        gemm(
                            dout,
                            MatRef::block(vd, d, b * seq, h * dh, seq, dh).t(),
                            0.0,
                            MatMut::dense(&mut dp, seq, seq),
                        );
                        gemm(
                            MatRef::dense(p, seq, seq).t(),
                            dout,
                            1.0,
                            MatMut::block(&mut dv, d, b * seq, h * dh, seq, dh),
                        );
                        for i in 0..seq {
                            let pr = &p[i * seq..(i + 1) * seq];
                            let dr = &mut dp[i * seq..(i + 1) * seq];
                            let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                            for (dv_, pv) in dr.iter_mut().zip(pr) {
                                *dv_ = pv * (*dv_ - dot) * scale;
                            }
                        }
                        gemm(
                            MatRef::dense(&dp, seq, seq),
                            MatRef::block(kd, d, b * seq, h * dh, seq, dh),
                            1.0,
                            MatMut::block(&mut dq, d, b * seq, h * dh, seq, dh),
                        );
                        gemm(
                            MatRef::dense(&dp, seq, seq).t(),
                            MatRef::block(qd, d, b * seq, h * dh, seq, dh),
                            1.0,
                            MatMut::block(&mut dk, d, b * seq, h * dh, seq, dh),
                        );
                    }
                }
                acc(*q, &mut |buf| add_into(buf, &dq));
                acc(*k, &mut |buf| add_into(buf, &dk));
                acc(*v, &mut |buf| add_into(buf, &dv));
            }
            Op::Gather { x, rows } => {
                let d = val(*x).last_dim();
                acc(*x, &mut |buf| {
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut buf[r * d..(r + 1) * d], &g[i * d..(i + 1) * d]);
                    }
                })
            }
            Op::Reshape(a) => acc(*a, &mut |buf| add_into(buf, g)),
            Op::Sum(a) => acc(*a, &mut |buf| {
                for d in buf.iter_mut() {
                    *d += g[0];
                }
            }),
            Op::Mean(a) => {
                let n = val(*a).numel() as f64;
                acc(*a, &mut |buf| {
                    for d in buf.iter_mut() {
                        *d += g[0] / n;
                    }
                })
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = targets.len();
                let vocab = probs.len() / n;
                let s = g[0] / n as f64;
                acc(*logits, &mut |buf| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..vocab {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            buf[r * vocab + j] += s * (probs[r * vocab + j] - onehot);
                        }
                    }
                })
            }
            Op::BceWithLogits { logits, targets } => {
                let s = g[0] / targets.len() as f64;
                let xv = val(*logits).data();
                acc(*logits, &mut |buf| {
                    for ((d, x), t) in buf.iter_mut().zip(xv).zip(targets) {
                        let sig = 1.0 / (1.0 + (-x).exp());
                        *d += s * (sig - t);
                    }
                })
            }
            Op::RowDistance {
                a,
                b,
                squared,
                dist,
            } => {
                let (ta, tb) = (val(*a), val(*b));
                let d = ta.last_dim();
                // d dist / d a = (a - b) / dist, with subgradient 0 at a == b.
                let coeff: Vec<f64> = dist
                    .iter()
                    .zip(g)
                    .map(|(dd, gg)| {
                        if *squared {
                            2.0 * gg
                        } else if *dd > 0.0 {
                            gg / dd
                        } else {
                            0.0
                        }
                    })
                    .collect();
                for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                    acc(v, &mut |buf| {
                        for (r, c) in coeff.iter().enumerate() {
                            for j in 0..d {
                                let i = r * d + j;
                                buf[i] += sign * c * (ta.data()[i] - tb.data()[i]);
                            }
                        }
                    });
                }
            }
            Op::RowNormalize { x, norms } => {
                let y = node.value.data();
                let d = node.value.last_dim();
                acc(*x, &mut |buf| {
                    for (r, n) in norms.iter().enumerate() {
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            buf[r * d + j] += (gr[j] - yr[j] * dot) / n;
                        }
                    }
                })
            }
        }
    }
}
