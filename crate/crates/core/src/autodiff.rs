//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is built eagerly: every primitive computes its value when it
//! is recorded, and the append-only node list doubles as the tape for the
//! backward pass. Any NaN/Inf produced by a primitive is reported as an error
//! carrying the offending node id.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    /// Leaf without gradient.
    Input,
    /// Leaf that receives a gradient.
    Leaf,
    Add,
    Sub,
    Mul,
    MulConst(f64),
    AddConst(f64),
    /// `a[.., n] + b[n]`
    AddRow,
    /// `a[m, n] * s[m]` (per-row scalar)
    MulRows,
    /// `b[n]` broadcast to `[rows, n]`
    BroadcastRows(usize),
    MatMul,
    /// `x W + b`
    Affine,
    /// Batched matmul `[g, m, k] x [g, k, n]`, optionally with `b` stored as `[g, n, k]`.
    Bmm { trans_b: bool },
    Silu,
    Softplus,
    LayerNorm { eps: f64 },
    Softmax,
    CrossEntropy { labels: Vec<usize> },
    Sum,
    Mean,
    RowSum,
    Mse,
    ConcatCols,
    SliceCols { start: usize, end: usize },
    ConcatRows,
    SliceRows { start: usize, end: usize },
    GatherRows { index: Vec<usize> },
    Reshape { shape: Vec<usize> },
    Permute { perm: Vec<usize> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::MulConst(_) => "mul_const",
            Op::AddConst(_) => "add_const",
            Op::AddRow => "add_row",
            Op::MulRows => "mul_rows",
            Op::BroadcastRows(_) => "broadcast_rows",
            Op::MatMul => "matmul",
            Op::Affine => "affine",
            Op::Bmm { .. } => "bmm",
            Op::Silu => "silu",
            Op::Softplus => "softplus",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax => "softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::RowSum => "row_sum",
            Op::Mse => "mse",
            Op::ConcatCols => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatRows => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
    needs_grad: bool,
}

/// Append-only computation tape.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    names: BTreeMap<String, usize>,
}

/// Gradients produced by [`Graph::backward`]; leaves the loss does not touch
/// read as zero.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros of `v`'s shape when it received none.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn collect(&self, vars: &[Var]) -> Vec<Tensor> {
        vars.iter().map(|&v| self.wrt(v)).collect()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_raw(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn mat_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::shape(op, format!("expected a matrix, got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn permute_data(src: &Tensor, perm: &[usize]) -> Tensor {
    let shape = src.shape();
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut src_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        src_strides[i] = src_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let n = src.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let data = src.data();
    for _ in 0..n {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::from_raw(out_shape, out)
}

fn layer_norm_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, (var + eps).sqrt())
}

/// Forward kernel shared by recording and replay.
fn eval_op(op: &Op, ins: &[&Tensor]) -> Result<Tensor> {
    let name = op.name();
    Ok(match op {
        Op::Input | Op::Leaf => unreachable!("leaves are not evaluated"),
        Op::Add => {
            same_shape(name, ins[0], ins[1])?;
            zip(ins[0], ins[1], |a, b| a + b)
        }
        Op::Sub => {
            same_shape(name, ins[0], ins[1])?;
            zip(ins[0], ins[1], |a, b| a - b)
        }
        Op::Mul => {
            same_shape(name, ins[0], ins[1])?;
            zip(ins[0], ins[1], |a, b| a * b)
        }
        Op::MulConst(c) => ins[0].map(|v| v * c),
        Op::AddConst(c) => ins[0].map(|v| v + c),
        Op::AddRow => {
            let (a, b) = (ins[0], ins[1]);
            let n = a.cols();
            if b.len() != n {
                return Err(Error::shape(name, format!("row {:?} vs {:?}", b.shape(), a.shape())));
            }
            let mut out = a.data().to_vec();
            for chunk in out.chunks_mut(n) {
                for (o, &bv) in chunk.iter_mut().zip(b.data()) {
                    *o += bv;
                }
            }
            Tensor::from_raw(a.shape().to_vec(), out)
        }
        Op::MulRows => {
            let (a, s) = (ins[0], ins[1]);
            let n = a.cols();
            if s.len() != a.rows() {
                return Err(Error::shape(name, format!("scales {:?} vs {:?}", s.shape(), a.shape())));
            }
            let mut out = a.data().to_vec();
            for (chunk, &sv) in out.chunks_mut(n).zip(s.data()) {
                chunk.iter_mut().for_each(|o| *o *= sv);
            }
            Tensor::from_raw(a.shape().to_vec(), out)
        }
        Op::BroadcastRows(rows) => {
            let b = ins[0];
            let mut out = Vec::with_capacity(rows * b.len());
            for _ in 0..*rows {
                out.extend_from_slice(b.data());
            }
            Tensor::from_raw(vec![*rows, b.len()], out)
        }
        Op::MatMul => {
            let (m, k) = mat_dims(name, ins[0])?;
            let (k2, n) = mat_dims(name, ins[1])?;
            if k != k2 {
                return Err(Error::shape(name, format!("{m}x{k} times {k2}x{n}")));
            }
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, ins[0].data(), false, ins[1].data(), false, 0.0, &mut out);
            Tensor::from_raw(vec![m, n], out)
        }
        Op::Affine => {
            let (m, k) = mat_dims(name, ins[0])?;
            let (k2, n) = mat_dims(name, ins[1])?;
            if k != k2 || ins[2].len() != n {
                return Err(Error::shape(
                    name,
                    format!("{m}x{k} times {k2}x{n} plus {:?}", ins[2].shape()),
                ));
            }
            let mut out = Vec::with_capacity(m * n);
            for _ in 0..m {
                out.extend_from_slice(ins[2].data());
            }
            gemm(m, k, n, ins[0].data(), false, ins[1].data(), false, 1.0, &mut out);
            Tensor::from_raw(vec![m, n], out)
        }
        Op::Bmm { trans_b } => {
            let (a, b) = (ins[0], ins[1]);
            if a.shape().len() != 3 || b.shape().len() != 3 || a.shape()[0] != b.shape()[0] {
                return Err(Error::shape(name, format!("{:?} x {:?}", a.shape(), b.shape())));
            }
            let (g, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let (kb, n) = if *trans_b {
                (b.shape()[2], b.shape()[1])
            } else {
                (b.shape()[1], b.shape()[2])
            };
            if k != kb {
                return Err(Error::shape(name, format!("{:?} x {:?}", a.shape(), b.shape())));
            }
            let mut out = vec![0.0; g * m * n];
            for i in 0..g {
                gemm(
                    m,
                    k,
                    n,
                    &a.data()[i * m * k..(i + 1) * m * k],
                    false,
                    &b.data()[i * k * n..(i + 1) * k * n],
                    *trans_b,
                    0.0,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
            Tensor::from_raw(vec![g, m, n], out)
        }
        Op::Silu => ins[0].map(silu),
        Op::Softplus => ins[0].map(softplus),
        Op::LayerNorm { eps } => {
            let x = ins[0];
            let n = x.cols();
            let mut out = Vec::with_capacity(x.len());
            for row in x.data().chunks(n) {
                let (mean, sd) = layer_norm_stats(row, *eps);
                out.extend(row.iter().map(|v| (v - mean) / sd));
            }
            Tensor::from_raw(x.shape().to_vec(), out)
        }
        Op::Softmax => {
            let x = ins[0];
            let n = x.cols();
            let mut out = Vec::with_capacity(x.len());
            for row in x.data().chunks(n) {
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let start = out.len();
                out.extend(row.iter().map(|v| (v - mx).exp()));
                let s: f64 = out[start..].iter().sum();
                out[start..].iter_mut().for_each(|v| *v /= s);
            }
            Tensor::from_raw(x.shape().to_vec(), out)
        }
        Op::CrossEntropy { labels } => {
            let (m, c) = mat_dims(name, ins[0])?;
            if labels.len() != m || labels.iter().any(|&l| l >= c) {
                return Err(Error::shape(name, format!("{} labels for {m}x{c} logits", labels.len())));
            }
            let mut total = 0.0;
            for (row, &l) in ins[0].data().chunks(c).zip(labels) {
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
                total += lse - row[l];
            }
            Tensor::scalar(total / m as f64)
        }
        Op::Sum => Tensor::scalar(ins[0].sum()),
        Op::Mean => Tensor::scalar(ins[0].sum() / ins[0].len() as f64),
        Op::RowSum => {
            let x = ins[0];
            let n = x.cols();
            Tensor::from_raw(vec![x.rows()], x.data().chunks(n).map(|r| r.iter().sum()).collect())
        }
        Op::Mse => {
            same_shape(name, ins[0], ins[1])?;
            let s: f64 = ins[0].data().iter().zip(ins[1].data()).map(|(a, b)| (a - b) * (a - b)).sum();
            Tensor::scalar(s / ins[0].len() as f64)
        }
        Op::ConcatCols => {
            let rows = ins[0].rows();
            if ins.iter().any(|t| t.rows() != rows || t.shape().len() != 2) {
                return Err(Error::shape(name, "inputs must be matrices with equal row counts"));
            }
            let total: usize = ins.iter().map(|t| t.cols()).sum();
            let mut out = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for t in ins {
                    out.extend_from_slice(t.row(r));
                }
            }
            Tensor::from_raw(vec![rows, total], out)
        }
        Op::SliceCols { start, end } => {
            let (m, n) = mat_dims(name, ins[0])?;
            if start >= end || *end > n {
                return Err(Error::shape(name, format!("{start}..{end} of {n} columns")));
            }
            let mut out = Vec::with_capacity(m * (end - start));
            for r in 0..m {
                out.extend_from_slice(&ins[0].row(r)[*start..*end]);
            }
            Tensor::from_raw(vec![m, end - start], out)
        }
        Op::ConcatRows => {
            let tail = &ins[0].shape()[1..];
            if ins.iter().any(|t| &t.shape()[1..] != tail) {
                return Err(Error::shape(name, "trailing dimensions differ"));
            }
            let rows: usize = ins.iter().map(|t| t.shape()[0]).sum();
            let mut data = Vec::new();
            for t in ins {
                data.extend_from_slice(t.data());
            }
            let mut shape = vec![rows];
            shape.extend_from_slice(tail);
            Tensor::from_raw(shape, data)
        }
        Op::SliceRows { start, end } => {
            let rows = ins[0].shape()[0];
            if start >= end || *end > rows {
                return Err(Error::shape(name, format!("{start}..{end} of {rows} rows")));
            }
            ins[0].slice_rows(*start, *end)
        }
        Op::GatherRows { index } => {
            let x = ins[0];
            let rows = x.shape()[0];
            let per: usize = x.shape()[1..].iter().product();
            if index.iter().any(|&i| i >= rows) || index.is_empty() {
                return Err(Error::shape(name, format!("index out of range for {rows} rows")));
            }
            let mut data = Vec::with_capacity(index.len() * per);
            for &i in index {
                data.extend_from_slice(&x.data()[i * per..(i + 1) * per]);
            }
            let mut shape = vec![index.len()];
            shape.extend_from_slice(&x.shape()[1..]);
            Tensor::from_raw(shape, data)
        }
        Op::Reshape { shape } => ins[0].clone().reshape(shape.clone())?,
        Op::Permute { perm } => {
            let rank = ins[0].shape().len();
            let mut seen = vec![false; rank];
            if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
                return Err(Error::shape(name, format!("bad permutation {perm:?} for rank {rank}")));
            }
            permute_data(ins[0], perm)
        }
    })
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
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

    /// Constant leaf: no gradient flows into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push_leaf(Op::Input, t, false)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push_leaf(Op::Leaf, t, true)
    }

    pub fn named_leaf(&mut self, name: &str, t: Tensor) -> Var {
        let v = self.leaf(t);
        self.names.insert(name.to_string(), v.0);
        v
    }

    pub fn named_input(&mut self, name: &str, t: Tensor) -> Var {
        let v = self.input(t);
        self.names.insert(name.to_string(), v.0);
        v
    }

    pub fn lookup(&self, name: &str) -> Option<Var> {
        self.names.get(name).map(|&i| Var(i))
    }

    fn push_leaf(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, inputs: Vec::new(), value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        let value = {
            let ins: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            eval_op(&op, &ins)?
        };
        let id = self.nodes.len();
        if !value.is_finite() {
            return Err(Error::NonFinite { node: id, op: op.name() });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { op, inputs: inputs.iter().map(|v| v.0).collect(), value, needs_grad });
        Ok(Var(id))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.push(Op::MulConst(c), &[a])
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var> {
        self.push(Op::AddConst(c), &[a])
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.push(Op::AddRow, &[a, row])
    }

    pub fn mul_rows(&mut self, a: Var, scales: Var) -> Result<Var> {
        self.push(Op::MulRows, &[a, scales])
    }

    pub fn broadcast_rows(&mut self, row: Var, rows: usize) -> Result<Var> {
        self.push(Op::BroadcastRows(rows), &[row])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul, &[a, b])
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.push(Op::Affine, &[x, w, b])
    }

    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        self.push(Op::Bmm { trans_b }, &[a, b])
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Silu, &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Softplus, &[a])
    }

    /// Per-row standardization over the last dimension (no affine parameters).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        self.push(Op::LayerNorm { eps }, &[a])
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Softmax, &[a])
    }

    /// Mean softmax cross-entropy of `logits[m, c]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.push(Op::CrossEntropy { labels: labels.to_vec() }, &[logits])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Mean, &[a])
    }

    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::RowSum, &[a])
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mse, &[a, b])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.push(Op::ConcatCols, parts)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.push(Op::SliceCols { start, end }, &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.push(Op::ConcatRows, parts)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.push(Op::SliceRows { start, end }, &[a])
    }

    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        self.push(Op::GatherRows { index: index.to_vec() }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.push(Op::Reshape { shape: shape.to_vec() }, &[a])
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        self.push(Op::Permute { perm: perm.to_vec() }, &[a])
    }

    /// Row-wise sum of squares: `[m, n] -> [m]`.
    pub fn row_sum_sq(&mut self, a: Var) -> Result<Var> {
        let sq = self.mul(a, a)?;
        self.row_sum(sq)
    }

    /// Backpropagate a scalar output into every differentiable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.backward_from(&[(loss, Tensor::full(self.shape(loss), 1.0))], None)
    }

    /// Backpropagate only along paths that reach `wrt`; other leaves stay at zero.
    pub fn backward_wrt(&self, loss: Var, wrt: &[Var]) -> Result<Gradients> {
        self.backward_from(&[(loss, Tensor::full(self.shape(loss), 1.0))], Some(wrt))
    }

    /// General vector-Jacobian product from seeded output gradients.
    pub fn backward_from(&self, seeds: &[(Var, Tensor)], wrt: Option<&[Var]>) -> Result<Gradients> {
        let n = self.nodes.len();
        let relevant: Vec<bool> = match wrt {
            None => self.nodes.iter().map(|nd| nd.needs_grad).collect(),
            Some(targets) => {
                let mut r = vec![false; n];
                for v in targets {
                    r[v.0] = true;
                }
                for i in 0..n {
                    if !r[i] && self.nodes[i].inputs.iter().any(|&j| r[j]) {
                        r[i] = true;
                    }
                }
                r
            }
        };
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        for (v, g) in seeds {
            if g.shape() != self.shape(*v) {
                return Err(Error::shape(
                    "backward",
                    format!("seed {:?} for output {:?}", g.shape(), self.shape(*v)),
                ));
            }
            accumulate(&mut grads[v.0], g.clone());
        }
        for i in (0..n).rev() {
            if !relevant[i] {
                grads[i] = None;
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            if !gout.is_finite() {
                return Err(Error::NonFiniteGrad { node: i, op: self.nodes[i].op.name() });
            }
            let node = &self.nodes[i];
            if node.inputs.is_empty() {
                grads[i] = Some(gout);
                continue;
            }
            let want: Vec<bool> = node.inputs.iter().map(|&j| relevant[j]).collect();
            let ins: Vec<&Tensor> = node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
            let local = vjp(&node.op, &ins, &node.value, &gout, &want);
            for ((&j, g), w) in node.inputs.iter().zip(local).zip(&want) {
                if let (Some(g), true) = (g, *w) {
                    accumulate(&mut grads[j], g);
                }
            }
            // Keep gradients of leaves only.
        }
        let shapes = self.nodes.iter().map(|nd| nd.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    /// Recompute every non-leaf node from the recorded leaves.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            let v = if node.inputs.is_empty() {
                node.value.clone()
            } else {
                let ins: Vec<&Tensor> = node.inputs.iter().map(|&j| &values[j]).collect();
                let v = eval_op(&node.op, &ins)?;
                if !v.is_finite() {
                    return Err(Error::NonFinite { node: id, op: node.op.name() });
                }
                v
            };
            values.push(v);
        }
        Ok(values)
    }

    /// True when [`Graph::replay`] reproduces every recorded activation bit for bit.
    pub fn replay_matches(&self) -> Result<bool> {
        let values = self.replay()?;
        Ok(values.iter().zip(&self.nodes).all(|(v, n)| {
            v.shape() == n.value.shape()
                && v.data().iter().zip(n.value.data()).all(|(a, b)| a.to_bits() == b.to_bits())
        }))
    }

    /// Topological order holds by construction; exposed for tests.
    pub fn is_topologically_ordered(&self) -> bool {
        self.nodes.iter().enumerate().all(|(i, n)| n.inputs.iter().all(|&j| j < i))
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

/// Local vector-Jacobian products for one node. Entries for inputs that are
/// not wanted may be `None`.
fn vjp(op: &Op, ins: &[&Tensor], out: &Tensor, g: &Tensor, want: &[bool]) -> Vec<Option<Tensor>> {
    match op {
        Op::Input | Op::Leaf => vec![],
        Op::Add => vec![Some(g.clone()), Some(g.clone())],
        Op::Sub => vec![Some(g.clone()), Some(g.map(|v| -v))],
        Op::Mul => vec![
            want[0].then(|| zip(g, ins[1], |a, b| a * b)),
            want[1].then(|| zip(g, ins[0], |a, b| a * b)),
        ],
        Op::MulConst(c) => vec![Some(g.map(|v| v * c))],
        Op::AddConst(_) => vec![Some(g.clone())],
        Op::AddRow => {
            let n = ins[0].cols();
            let gb = want[1].then(|| {
                let mut acc = vec![0.0; n];
                for chunk in g.data().chunks(n) {
                    acc.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                }
                Tensor::from_raw(ins[1].shape().to_vec(), acc)
            });
            vec![Some(g.clone()), gb]
        }
        Op::MulRows => {
            let n = ins[0].cols();
            let ga = want[0].then(|| {
                let mut d = g.data().to_vec();
                for (chunk, &s) in d.chunks_mut(n).zip(ins[1].data()) {
                    chunk.iter_mut().for_each(|v| *v *= s);
                }
                Tensor::from_raw(g.shape().to_vec(), d)
            });
            let gs = want[1].then(|| {
                let d = g
                    .data()
                    .chunks(n)
                    .zip(ins[0].data().chunks(n))
                    .map(|(gr, ar)| gr.iter().zip(ar).map(|(x, y)| x * y).sum())
                    .collect();
                Tensor::from_raw(ins[1].shape().to_vec(), d)
            });
            vec![ga, gs]
        }
        Op::BroadcastRows(_) => {
            let n = ins[0].len();
            let mut acc = vec![0.0; n];
            for chunk in g.data().chunks(n) {
                acc.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
            }
            vec![Some(Tensor::from_raw(ins[0].shape().to_vec(), acc))]
        }
        Op::MatMul | Op::Affine => {
            let (m, k) = (ins[0].shape()[0], ins[0].shape()[1]);
            let n = ins[1].shape()[1];
            let ga = want[0].then(|| {
                let mut d = vec![0.0; m * k];
                gemm(m, n, k, g.data(), false, ins[1].data(), true, 0.0, &mut d);
                Tensor::from_raw(vec![m, k], d)
            });
            let gw = want[1].then(|| {
                let mut d = vec![0.0; k * n];
                gemm(k, m, n, ins[0].data(), true, g.data(), false, 0.0, &mut d);
                Tensor::from_raw(vec![k, n], d)
            });
            let mut res = vec![ga, gw];
            if matches!(op, Op::Affine) {
                res.push(want[2].then(|| {
                    let mut acc = vec![0.0; n];
                    for chunk in g.data().chunks(n) {
                        acc.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                    }
                    Tensor::from_raw(ins[2].shape().to_vec(), acc)
                }));
            }
            res
        }
        Op::Bmm { trans_b } => {
            let (gn, m, k) = (ins[0].shape()[0], ins[0].shape()[1], ins[0].shape()[2]);
            let n = out.shape()[2];
            let ga = want[0].then(|| {
                let mut d = vec![0.0; gn * m * k];
                for i in 0..gn {
                    let gi = &g.data()[i * m * n..(i + 1) * m * n];
                    let bi = &ins[1].data()[i * k * n..(i + 1) * k * n];
                    // b is [k, n] (or [n, k] when transposed); ga = g b^T
                    gemm(m, n, k, gi, false, bi, !*trans_b, 0.0, &mut d[i * m * k..(i + 1) * m * k]);
                }
                Tensor::from_raw(ins[0].shape().to_vec(), d)
            });
            let gb = want[1].then(|| {
                let mut d = vec![0.0; gn * k * n];
                for i in 0..gn {
                    let gi = &g.data()[i * m * n..(i + 1) * m * n];
                    let ai = &ins[0].data()[i * m * k..(i + 1) * m * k];
                    let dst = &mut d[i * k * n..(i + 1) * k * n];
                    if *trans_b {
                        // gb[n, k] = g^T a
                        gemm(n, m, k, gi, true, ai, false, 0.0, dst);
                    } else {
                        gemm(k, m, n, ai, true, gi, false, 0.0, dst);
                    }
                }
                Tensor::from_raw(ins[1].shape().to_vec(), d)
            });
            vec![ga, gb]
        }
        Op::Silu => vec![Some(zip(g, ins[0], |gv, x| {
            let s = sigmoid(x);
            gv * (s + x * s * (1.0 - s))
        }))],
        Op::Softplus => vec![Some(zip(g, ins[0], |gv, x| gv * sigmoid(x)))],
        Op::LayerNorm { eps } => {
            let n = ins[0].cols();
            let mut d = Vec::with_capacity(g.len());
            for ((xr, yr), gr) in ins[0].data().chunks(n).zip(out.data().chunks(n)).zip(g.data().chunks(n)) {
                let (_, sd) = layer_norm_stats(xr, *eps);
                let mg = gr.iter().sum::<f64>() / n as f64;
                let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                d.extend(gr.iter().zip(yr).map(|(gv, y)| (gv - mg - y * mgy) / sd));
            }
            vec![Some(Tensor::from_raw(g.shape().to_vec(), d))]
        }
        Op::Softmax => {
            let n = out.cols();
            let mut d = Vec::with_capacity(g.len());
            for (yr, gr) in out.data().chunks(n).zip(g.data().chunks(n)) {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                d.extend(yr.iter().zip(gr).map(|(y, gv)| y * (gv - dot)));
            }
            vec![Some(Tensor::from_raw(g.shape().to_vec(), d))]
        }
        Op::CrossEntropy { labels } => {
            let (m, c) = (ins[0].shape()[0], ins[0].shape()[1]);
            let scale = g.item() / m as f64;
            let mut d = Vec::with_capacity(m * c);
            for (row, &l) in ins[0].data().chunks(c).zip(labels) {
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                d.extend(row.iter().enumerate().map(|(j, v)| {
                    let p = (v - mx).exp() / s;
                    scale * (p - if j == l { 1.0 } else { 0.0 })
                }));
            }
            vec![Some(Tensor::from_raw(vec![m, c], d))]
        }
        Op::Sum => vec![Some(Tensor::full(ins[0].shape(), g.item()))],
        Op::Mean => vec![Some(Tensor::full(ins[0].shape(), g.item() / ins[0].len() as f64))],
        Op::RowSum => {
            let n = ins[0].cols();
            let mut d = Vec::with_capacity(ins[0].len());
            for &gv in g.data() {
                d.extend(std::iter::repeat_n(gv, n));
            }
            vec![Some(Tensor::from_raw(ins[0].shape().to_vec(), d))]
        }
        Op::Mse => {
            let c = 2.0 * g.item() / ins[0].len() as f64;
            let ga = zip(ins[0], ins[1], |a, b| c * (a - b));
            let gb = want[1].then(|| ga.map(|v| -v));
            vec![Some(ga), gb]
        }
        Op::ConcatCols => {
            let rows = g.rows();
            let total = g.cols();
            let mut offset = 0;
            ins.iter()
                .zip(want)
                .map(|(t, &w)| {
                    let c = t.cols();
                    let res = w.then(|| {
                        let mut d = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + c]);
                        }
                        Tensor::from_raw(t.shape().to_vec(), d)
                    });
                    offset += c;
                    res
                })
                .collect()
        }
        Op::SliceCols { start, end } => {
            let (m, n) = (ins[0].shape()[0], ins[0].shape()[1]);
            let w = end - start;
            let mut d = vec![0.0; m * n];
            for r in 0..m {
                d[r * n + start..r * n + end].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
            }
            vec![Some(Tensor::from_raw(vec![m, n], d))]
        }
        Op::ConcatRows => {
            let mut offset = 0;
            ins.iter()
                .zip(want)
                .map(|(t, &w)| {
                    let len = t.len();
                    let res = w.then(|| Tensor::from_raw(t.shape().to_vec(), g.data()[offset..offset + len].to_vec()));
                    offset += len;
                    res
                })
                .collect()
        }
        Op::SliceRows { start, .. } => {
            let per: usize = ins[0].shape()[1..].iter().product();
            let mut d = vec![0.0; ins[0].len()];
            d[start * per..start * per + g.len()].copy_from_slice(g.data());
            vec![Some(Tensor::from_raw(ins[0].shape().to_vec(), d))]
        }
        Op::GatherRows { index } => {
            let per: usize = ins[0].shape()[1..].iter().product();
            let mut d = vec![0.0; ins[0].len()];
            for (k, &i) in index.iter().enumerate() {
                d[i * per..(i + 1) * per]
                    .iter_mut()
                    .zip(&g.data()[k * per..(k + 1) * per])
                    .for_each(|(a, b)| *a += b);
            }
            vec![Some(Tensor::from_raw(ins[0].shape().to_vec(), d))]
        }
        Op::Reshape { .. } => vec![Some(Tensor::from_raw(ins[0].shape().to_vec(), g.data().to_vec()))],
        Op::Permute { perm } => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            vec![Some(permute_data(g, &inv))]
        }
    }
}

/// Maximum over coordinates of `|analytic - central difference| / max(1, |analytic|)`
/// for a scalar-valued graph builder evaluated at `point`.
pub fn finite_difference_check<F>(f: F, point: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let coords: Vec<(usize, usize)> = point.iter().enumerate().flat_map(|(i, t)| (0..t.len()).map(move |k| (i, k))).collect();
    finite_difference_check_at(f, point, h, &coords)
}

/// [`finite_difference_check`] restricted to `(tensor, element)` coordinates.
pub fn finite_difference_check_at<F>(f: F, point: &[Tensor], h: f64, coords: &[(usize, usize)]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::Invalid(format!("finite-difference step must be positive, got {h}")));
    }
    let eval = |pt: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = pt.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        if g.value(out).len() != 1 {
            return Err(Error::shape("finite_difference_check", "graph must be scalar-valued"));
        }
        Ok(g.value(out).item())
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = point.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(Error::shape("finite_difference_check", "graph must be scalar-valued"));
    }
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.wrt(*v)).collect();
    let mut worst: f64 = 0.0;
    let mut pt: Vec<Tensor> = point.to_vec();
    for &(ti, k) in coords {
        if ti >= pt.len() || k >= pt[ti].len() {
            return Err(Error::Invalid(format!("coordinate ({ti}, {k}) out of range")));
        }
        let orig = pt[ti].data()[k];
        pt[ti].data_mut()[k] = orig + h;
        let fp = eval(&pt)?;
        pt[ti].data_mut()[k] = orig - h;
        let fm = eval(&pt)?;
        pt[ti].data_mut()[k] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic[ti].data()[k];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
