//! Tape of primitive operations and its reverse pass.
//!
//! Every operation appends a node holding its output value, so the node list
//! is already in topological order. `backward` walks it once from the loss
//! towards the leaves.

use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::gemm::{gemm, Mat};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{strides, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch statistics computed by a train-mode batch norm (population variance).
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    Scalar,
    Row,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryKind {
    Relu,
    Tanh,
    Sigmoid,
    Exp,
    Log,
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Matmul { a: Var, b: Var },
    Bmm { a: Var, b: Var, trans_b: bool },
    Binary { kind: BinaryKind, a: Var, b: Var, mode: Broadcast },
    Unary { kind: UnaryKind, x: Var },
    Scale { x: Var, factor: f64 },
    AddScalar { x: Var },
    Softmax { x: Var },
    LogSoftmax { x: Var, mask: Option<Vec<bool>> },
    BatchNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
    Reshape { x: Var },
    Permute { x: Var, axes: Vec<usize> },
    Expand { x: Var },
    ConcatLast { parts: Vec<Var> },
    GatherRows { x: Var, idx: Vec<usize> },
    PickLast { x: Var, idx: Vec<usize> },
    SumAxis { x: Var, axis: usize },
    SumAll { x: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradient tape. Values are stored on the tape; `truncate` drops nodes
/// recorded after a mark so long inference loops keep memory bounded.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Current tape length, for use with [`Graph::truncate`].
    pub fn mark(&self) -> usize {
        self.nodes.len()
    }

    /// Drops every node recorded at or after `mark`.
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
        self.params.retain(|_, v| v.0 < mark);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Result<Var> {
        value.check_finite(name)?;
        Ok(self.push_unchecked(value, op, needs_grad))
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    /// Records a tensor that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Constant, false, "constant")
    }

    /// Records a trainable leaf. Registering the same parameter twice returns
    /// the same node so its gradient accumulates in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push_unchecked(store.get(id).clone(), Op::Param(id), true);
        self.params.insert(id, v);
        v
    }

    /// `a[m,k] x b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.mismatch("matmul", a, b));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            Mat::row_major(self.value(a).data(), k),
            Mat::row_major(self.value(b).data(), n),
            &mut out,
            0.0,
        );
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new([m, n], out)?, Op::Matmul { a, b }, needs, "matmul")
    }

    /// Batched product over the leading axis: `a[g,m,k] x b[g,k,n]`, or
    /// `a[g,m,k] x b[g,n,k]^T` when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(self.mismatch("bmm", a, b));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(self.mismatch("bmm", a, b));
        }
        let mut out = vec![0.0; g * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for i in 0..g {
                let ab = &ad[i * m * k..(i + 1) * m * k];
                let bb = &bd[i * k * n..(i + 1) * k * n];
                let bm = if trans_b {
                    Mat::transposed(bb, k)
                } else {
                    Mat::row_major(bb, n)
                };
                gemm(m, k, n, Mat::row_major(ab, k), bm, &mut out[i * m * n..(i + 1) * m * n], 0.0);
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new([g, m, n], out)?, Op::Bmm { a, b, trans_b }, needs, "bmm")
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let mode = if sa == sb {
            Broadcast::Same
        } else if self.value(b).numel() == 1 && sb.len() <= 1 {
            Broadcast::Scalar
        } else if sb.len() == 1 && !sa.is_empty() && sa[sa.len() - 1] == sb[0] {
            Broadcast::Row
        } else {
            return Err(self.mismatch(name, a, b));
        };
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let width = bv.len();
        let f = match kind {
            BinaryKind::Add => |x: f64, y: f64| x + y,
            BinaryKind::Sub => |x: f64, y: f64| x - y,
            BinaryKind::Mul => |x: f64, y: f64| x * y,
            BinaryKind::Div => |x: f64, y: f64| x / y,
        };
        let out: Vec<f64> = match mode {
            Broadcast::Same => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Scalar => av.iter().map(|&x| f(x, bv[0])).collect(),
            Broadcast::Row => av
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bv[i % width]))
                .collect(),
        };
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Binary { kind, a, b, mode }, needs, name)
    }

    /// Elementwise sum; `b` may also be a scalar or a row broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b, "div")
    }

    fn unary(&mut self, kind: UnaryKind, x: Var, name: &'static str) -> Result<Var> {
        let f = match kind {
            UnaryKind::Relu => |v: f64| v.max(0.0),
            UnaryKind::Tanh => f64::tanh,
            UnaryKind::Sigmoid => |v: f64| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            },
            UnaryKind::Exp => f64::exp,
            UnaryKind::Log => f64::ln,
        };
        let src = self.value(x);
        let value = Tensor::new(src.shape().to_vec(), src.data().iter().map(|&v| f(v)).collect())?;
        let needs = self.needs(x);
        self.push(value, Op::Unary { kind, x }, needs, name)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, x, "relu")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Tanh, x, "tanh")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, x, "sigmoid")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, x, "exp")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, x, "log")
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let src = self.value(x);
        let value = Tensor::new(src.shape().to_vec(), src.data().iter().map(|v| v * factor).collect())?;
        let needs = self.needs(x);
        self.push(value, Op::Scale { x, factor }, needs, "scale")
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let src = self.value(x);
        let value = Tensor::new(src.shape().to_vec(), src.data().iter().map(|v| v + c).collect())?;
        let needs = self.needs(x);
        self.push(value, Op::AddScalar { x }, needs, "add_scalar")
    }

    fn check_mask(&self, x: Var, mask: Option<&[bool]>) -> Result<()> {
        if let Some(m) = mask {
            if m.len() != self.value(x).numel() {
                return Err(TensorError::ShapeMismatch {
                    op: "softmax mask",
                    lhs: self.shape(x).to_vec(),
                    rhs: vec![m.len()],
                });
            }
        }
        Ok(())
    }

    /// Softmax over the last axis. `mask` has one flag per element; `false`
    /// entries are excluded and come out as exactly zero.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        self.check_mask(x, mask)?;
        let src = self.value(x);
        let n = src.last_dim();
        let mut out = vec![0.0; src.numel()];
        for (row, (xs, ys)) in src.data().chunks(n).zip(out.chunks_mut(n)).enumerate() {
            let allowed = |j: usize| mask.is_none_or(|m| m[row * n + j]);
            let max = (0..n)
                .filter(|&j| allowed(j))
                .map(|j| xs[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(TensorError::FullyMaskedRow { row });
            }
            let mut total = 0.0;
            for j in 0..n {
                if allowed(j) {
                    ys[j] = (xs[j] - max).exp();
                    total += ys[j];
                }
            }
            for y in ys.iter_mut() {
                *y /= total;
            }
        }
        let value = Tensor::new(src.shape().to_vec(), out)?;
        let needs = self.needs(x);
        self.push(value, Op::Softmax { x }, needs, "softmax")
    }

    /// Log-softmax over the last axis. Masked entries are `-inf`; they are the
    /// only non-finite values any operation may emit.
    pub fn log_softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        self.check_mask(x, mask)?;
        let src = self.value(x);
        let n = src.last_dim();
        let mut out = vec![f64::NEG_INFINITY; src.numel()];
        for (row, (xs, ys)) in src.data().chunks(n).zip(out.chunks_mut(n)).enumerate() {
            let allowed = |j: usize| mask.is_none_or(|m| m[row * n + j]);
            let max = (0..n)
                .filter(|&j| allowed(j))
                .map(|j| xs[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(TensorError::FullyMaskedRow { row });
            }
            let total: f64 = (0..n).filter(|&j| allowed(j)).map(|j| (xs[j] - max).exp()).sum();
            let log_total = total.ln();
            for j in 0..n {
                if allowed(j) {
                    ys[j] = xs[j] - max - log_total;
                    if !ys[j].is_finite() {
                        return Err(TensorError::NonFinite {
                            op: "log_softmax",
                            index: row * n + j,
                        });
                    }
                }
            }
        }
        let value = Tensor::new(src.shape().to_vec(), out)?;
        let needs = self.needs(x);
        let mask = mask.map(<[bool]>::to_vec);
        Ok(self.push_unchecked(value, Op::LogSoftmax { x, mask }, needs))
    }

    fn check_bn(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize)> {
        let sx = self.shape(x);
        if sx.len() != 2 {
            return Err(TensorError::Invalid(format!("batch_norm expects rank 2, got {sx:?}")));
        }
        let d = sx[1];
        if self.shape(gamma) != [d] {
            return Err(self.mismatch("batch_norm gamma", x, gamma));
        }
        if self.shape(beta) != [d] {
            return Err(self.mismatch("batch_norm beta", x, beta));
        }
        Ok((sx[0], d))
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    ) -> Result<Var> {
        let d = mean.len();
        let (xv, gv, bv) = (self.value(x), self.value(gamma).data(), self.value(beta).data());
        let out: Vec<f64> = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let j = i % d;
                gv[j] * (v - mean[j]) * inv_std[j] + bv[j]
            })
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            },
            needs,
            "batch_norm",
        )
    }

    /// Batch norm over the rows of `x[b,d]` using the batch's own statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (rows, d) = self.check_bn(x, gamma, beta)?;
        if rows < 2 {
            return Err(TensorError::BatchTooSmall { rows });
        }
        let xv = self.value(x).data();
        let mut mean = vec![0.0; d];
        for row in xv.chunks(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= rows as f64;
        }
        let mut var = vec![0.0; d];
        for row in xv.chunks(d) {
            for j in 0..d {
                let c = row[j] - mean[j];
                var[j] += c * c;
            }
        }
        for v in &mut var {
            *v /= rows as f64;
        }
        let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.bn_apply(x, gamma, beta, mean.clone(), inv_std, true)?;
        Ok((out, BatchStats { mean, var }))
    }

    /// Batch norm with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (_, d) = self.check_bn(x, gamma, beta)?;
        if mean.len() != d || var.len() != d {
            return Err(TensorError::Invalid("running statistics have the wrong width".into()));
        }
        let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.bn_apply(x, gamma, beta, mean.to_vec(), inv_std, false)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = self.value(x);
        if shape.iter().product::<usize>() != src.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: src.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = Tensor::new(shape.to_vec(), src.data().to_vec())?;
        let needs = self.needs(x);
        Ok(self.push_unchecked(value, Op::Reshape { x }, needs))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let src = self.value(x);
        let (shape, data) = permute_data(src.data(), src.shape(), axes)?;
        let value = Tensor::new(shape, data)?;
        let needs = self.needs(x);
        Ok(self.push_unchecked(value, Op::Permute { x, axes: axes.to_vec() }, needs))
    }

    /// Broadcasts size-1 axes of `x` up to `shape` (same rank).
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = self.value(x);
        let sx = src.shape();
        if sx.len() != shape.len() || sx.iter().zip(shape).any(|(&a, &b)| a != b && a != 1) {
            return Err(TensorError::ShapeMismatch {
                op: "expand",
                lhs: sx.to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let bstrides = broadcast_strides(sx);
        let data: Vec<f64> = StridedIter::new(shape, &bstrides)
            .map(|off| src.data()[off])
            .collect();
        let value = Tensor::new(shape.to_vec(), data)?;
        let needs = self.needs(x);
        Ok(self.push_unchecked(value, Op::Expand { x }, needs))
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?;
        let lead = &self.shape(first)[..self.shape(first).len() - 1];
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || &s[..lead.len()] != lead {
                return Err(self.mismatch("concat_last", first, p));
            }
        }
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).last_dim()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let needs = parts.iter().any(|&p| self.needs(p));
        let value = Tensor::new(shape, out)?;
        Ok(self.push_unchecked(value, Op::ConcatLast { parts: parts.to_vec() }, needs))
    }

    /// Selects slices along the first axis.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let src = self.value(x);
        let sx = src.shape();
        if sx.is_empty() {
            return Err(TensorError::Invalid("gather_rows on a scalar".into()));
        }
        let width = src.numel() / sx[0].max(1);
        let mut out = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            if i >= sx[0] {
                return Err(TensorError::Invalid(format!("row {i} out of range for {sx:?}")));
            }
            out.extend_from_slice(&src.data()[i * width..(i + 1) * width]);
        }
        let mut shape = sx.to_vec();
        shape[0] = idx.len();
        let value = Tensor::new(shape, out)?;
        let needs = self.needs(x);
        Ok(self.push_unchecked(value, Op::GatherRows { x, idx: idx.to_vec() }, needs))
    }

    /// From `x[r,n]` picks `x[i, idx[i]]` for every row, giving shape `[r]`.
    pub fn pick_last(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let src = self.value(x);
        let sx = src.shape();
        if sx.len() != 2 || sx[0] != idx.len() || idx.iter().any(|&j| j >= sx[1]) {
            return Err(TensorError::ShapeMismatch {
                op: "pick_last",
                lhs: sx.to_vec(),
                rhs: vec![idx.len()],
            });
        }
        let n = sx[1];
        let out: Vec<f64> = idx.iter().enumerate().map(|(r, &j)| src.data()[r * n + j]).collect();
        let value = Tensor::new([idx.len()], out)?;
        let needs = self.needs(x);
        self.push(value, Op::PickLast { x, idx: idx.to_vec() }, needs, "pick_last")
    }

    /// Sums out one axis.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let src = self.value(x);
        let sx = src.shape();
        if axis >= sx.len() {
            return Err(TensorError::Invalid(format!("axis {axis} out of range for {sx:?}")));
        }
        let outer: usize = sx[..axis].iter().product();
        let len = sx[axis];
        let inner: usize = sx[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        let d = src.data();
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for a in 0..len {
                let base = (o * len + a) * inner;
                for (t, v) in dst.iter_mut().zip(&d[base..base + inner]) {
                    *t += v;
                }
            }
        }
        let mut shape = sx.to_vec();
        shape.remove(axis);
        let value = Tensor::new(shape, out)?;
        let needs = self.needs(x);
        self.push(value, Op::SumAxis { x, axis }, needs, "sum_axis")
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(total), Op::SumAll { x }, needs, "sum_all")
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Reverse pass from a scalar `loss`. Parameters that the loss does not
    /// depend on have no entry (see [`Gradients::get_or_zeros`]).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out: Vec<Option<Tensor>> = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backward_node(node, g, &mut grads, &mut out)?;
        }
        Ok(Gradients::from_parts(out))
    }

    fn backward_node(
        &self,
        node: &Node,
        g: Vec<f64>,
        grads: &mut [Option<Vec<f64>>],
        out: &mut Vec<Option<Tensor>>,
    ) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => {
                if out.len() <= id.index() {
                    out.resize(id.index() + 1, None);
                }
                out[id.index()] = Some(Tensor::new(y.shape().to_vec(), g)?);
            }
            Op::Matmul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.needs(*a) {
                    let bv = self.value(*b).data();
                    let buf = slot(grads, *a, m * k);
                    gemm(m, n, k, Mat::row_major(&g, n), Mat::transposed(bv, n), buf, 1.0);
                }
                if self.needs(*b) {
                    let av = self.value(*a).data();
                    let buf = slot(grads, *b, k * n);
                    gemm(k, m, n, Mat::transposed(av, k), Mat::row_major(&g, n), buf, 1.0);
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (gs, m, k) = (sa[0], sa[1], sa[2]);
                let n = y.shape()[2];
                if self.needs(*a) {
                    let bv = self.value(*b).data();
                    let buf = slot(grads, *a, gs * m * k);
                    for i in 0..gs {
                        let gb = &g[i * m * n..(i + 1) * m * n];
                        let bb = &bv[i * k * n..(i + 1) * k * n];
                        // dA = dC * B^T, or dC * B when B was already transposed.
                        let bm = if *trans_b {
                            Mat::row_major(bb, k)
                        } else {
                            Mat::transposed(bb, n)
                        };
                        gemm(m, n, k, Mat::row_major(gb, n), bm, &mut buf[i * m * k..(i + 1) * m * k], 1.0);
                    }
                }
                if self.needs(*b) {
                    let av = self.value(*a).data();
                    let buf = slot(grads, *b, gs * k * n);
                    for i in 0..gs {
                        let gb = &g[i * m * n..(i + 1) * m * n];
                        let ab = &av[i * m * k..(i + 1) * m * k];
                        let dst = &mut buf[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // dB[n,k] = dC^T * A
                            gemm(n, m, k, Mat::transposed(gb, n), Mat::row_major(ab, k), dst, 1.0);
                        } else {
                            // dB[k,n] = A^T * dC
                            gemm(k, m, n, Mat::transposed(ab, k), Mat::row_major(gb, n), dst, 1.0);
                        }
                    }
                }
            }
            Op::Binary { kind, a, b, mode } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let width = bv.len();
                let bi = |i: usize| match mode {
                    Broadcast::Same => i,
                    Broadcast::Scalar => 0,
                    Broadcast::Row => i % width,
                };
                if self.needs(*a) {
                    let buf = slot(grads, *a, av.len());
                    for (i, (t, gi)) in buf.iter_mut().zip(&g).enumerate() {
                        *t += match kind {
                            BinaryKind::Add | BinaryKind::Sub => *gi,
                            BinaryKind::Mul => gi * bv[bi(i)],
                            BinaryKind::Div => gi / bv[bi(i)],
                        };
                    }
                }
                if self.needs(*b) {
                    let buf = slot(grads, *b, width);
                    for (i, gi) in g.iter().enumerate() {
                        let j = bi(i);
                        buf[j] += match kind {
                            BinaryKind::Add => *gi,
                            BinaryKind::Sub => -gi,
                            BinaryKind::Mul => gi * av[i],
                            BinaryKind::Div => -gi * av[i] / (bv[j] * bv[j]),
                        };
                    }
                }
            }
            Op::Unary { kind, x } => {
                let xv = self.value(*x).data();
                let yv = y.data();
                let buf = slot(grads, *x, xv.len());
                for i in 0..buf.len() {
                    buf[i] += g[i]
                        * match kind {
                            UnaryKind::Relu => {
                                if xv[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Tanh => 1.0 - yv[i] * yv[i],
                            UnaryKind::Sigmoid => yv[i] * (1.0 - yv[i]),
                            UnaryKind::Exp => yv[i],
                            UnaryKind::Log => 1.0 / xv[i],
                        };
                }
            }
            Op::Scale { x, factor } => {
                let buf = slot(grads, *x, g.len());
                for (t, gi) in buf.iter_mut().zip(&g) {
                    *t += gi * factor;
                }
            }
            Op::AddScalar { x } | Op::Reshape { x } => {
                let buf = slot(grads, *x, g.len());
                for (t, gi) in buf.iter_mut().zip(&g) {
                    *t += gi;
                }
            }
            Op::Softmax { x } => {
                let n = y.last_dim();
                let buf = slot(grads, *x, g.len());
                for ((ys, gs), ts) in y.data().chunks(n).zip(g.chunks(n)).zip(buf.chunks_mut(n)) {
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        ts[j] += ys[j] * (gs[j] - dot);
                    }
                }
            }
            Op::LogSoftmax { x, mask } => {
                let n = y.last_dim();
                let buf = slot(grads, *x, g.len());
                for (row, ((ys, gs), ts)) in y.data().chunks(n).zip(g.chunks(n)).zip(buf.chunks_mut(n)).enumerate() {
                    let allowed = |j: usize| mask.as_ref().is_none_or(|m| m[row * n + j]);
                    let total: f64 = (0..n).filter(|&j| allowed(j)).map(|j| gs[j]).sum();
                    for j in 0..n {
                        if allowed(j) {
                            ts[j] += gs[j] - ys[j].exp() * total;
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            } => {
                let d = mean.len();
                let xv = self.value(*x).data();
                let rows = xv.len() / d;
                let gv = self.value(*gamma).data();
                let xhat: Vec<f64> = xv
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| (v - mean[i % d]) * inv_std[i % d])
                    .collect();
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for (i, gi) in g.iter().enumerate() {
                    dgamma[i % d] += gi * xhat[i];
                    dbeta[i % d] += gi;
                }
                if self.needs(*x) {
                    // Batch statistics depend on x; running statistics are constants.
                    let buf = slot(grads, *x, xv.len());
                    if *batch_stats {
                        let r = rows as f64;
                        for i in 0..xv.len() {
                            let j = i % d;
                            let dxhat = g[i] * gv[j];
                            let s1 = dbeta[j] * gv[j];
                            let s2 = dgamma[j] * gv[j];
                            buf[i] += inv_std[j] / r * (r * dxhat - s1 - xhat[i] * s2);
                        }
                    } else {
                        for i in 0..xv.len() {
                            let j = i % d;
                            buf[i] += g[i] * gv[j] * inv_std[j];
                        }
                    }
                }
                if self.needs(*gamma) {
                    add_into(slot(grads, *gamma, d), &dgamma);
                }
                if self.needs(*beta) {
                    add_into(slot(grads, *beta, d), &dbeta);
                }
            }
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let (_, back) = permute_data(&g, y.shape(), &inverse)?;
                add_into(slot(grads, *x, back.len()), &back);
            }
            Op::Expand { x } => {
                let sx = self.shape(*x).to_vec();
                let bstrides = broadcast_strides(&sx);
                let buf = slot(grads, *x, sx.iter().product());
                for (gi, off) in g.iter().zip(StridedIter::new(y.shape(), &bstrides)) {
                    buf[off] += gi;
                }
            }
            Op::ConcatLast { parts } => {
                let total = y.last_dim();
                let rows = g.len() / total.max(1);
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    if self.needs(p) {
                        let buf = slot(grads, p, rows * w);
                        for r in 0..rows {
                            add_into(&mut buf[r * w..(r + 1) * w], &g[r * total + offset..r * total + offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::GatherRows { x, idx } => {
                let numel = self.value(*x).numel();
                let width = g.len() / idx.len().max(1);
                let buf = slot(grads, *x, numel);
                for (r, &i) in idx.iter().enumerate() {
                    add_into(&mut buf[i * width..(i + 1) * width], &g[r * width..(r + 1) * width]);
                }
            }
            Op::PickLast { x, idx } => {
                let sx = self.shape(*x);
                let n = sx[1];
                let buf = slot(grads, *x, sx[0] * n);
                for (r, &j) in idx.iter().enumerate() {
                    buf[r * n + j] += g[r];
                }
            }
            Op::SumAxis { x, axis } => {
                let sx = self.shape(*x).to_vec();
                let outer: usize = sx[..*axis].iter().product();
                let len = sx[*axis];
                let inner: usize = sx[axis + 1..].iter().product();
                let buf = slot(grads, *x, outer * len * inner);
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for a in 0..len {
                        let base = (o * len + a) * inner;
                        add_into(&mut buf[base..base + inner], src);
                    }
                }
            }
            Op::SumAll { x } => {
                let buf = slot(grads, *x, self.value(*x).numel());
                for t in buf.iter_mut() {
                    *t += g[0];
                }
            }
        }
        Ok(())
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn broadcast_strides(shape: &[usize]) -> Vec<usize> {
    strides(shape)
        .into_iter()
        .zip(shape)
        .map(|(s, &d)| if d == 1 { 0 } else { s })
        .collect()
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut seen = vec![false; shape.len()];
    if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
        return Err(TensorError::Invalid(format!("invalid permutation {axes:?} for {shape:?}")));
    }
    let src_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let walk: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
    let out = StridedIter::new(&out_shape, &walk).map(|off| data[off]).collect();
    Ok((out_shape, out))
}

/// Visits every multi-index of `shape` in row-major order, yielding the flat
/// offset under `strides`.
struct StridedIter<'a> {
    shape: &'a [usize],
    strides: &'a [usize],
    index: Vec<usize>,
    offset: usize,
    remaining: usize,
}

impl<'a> StridedIter<'a> {
    fn new(shape: &'a [usize], strides: &'a [usize]) -> Self {
        Self {
            shape,
            strides,
            index: vec![0; shape.len()],
            offset: 0,
            remaining: shape.iter().product(),
        }
    }
}

impl Iterator for StridedIter<'_> {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let current = self.offset;
        for ax in (0..self.shape.len()).rev() {
            self.index[ax] += 1;
            self.offset += self.strides[ax];
            if self.index[ax] < self.shape[ax] {
                break;
            }
            self.offset -= self.strides[ax] * self.shape[ax];
            self.index[ax] = 0;
        }
        Some(current)
    }
}
