//! Reverse-mode tape.
//!
//! Every operation appends a node holding its forward value and a recipe for
//! the vector-Jacobian product. Nodes are appended in evaluation order, so a
//! single reverse sweep over node ids is a valid topological traversal.

use std::collections::HashMap;
use std::ops::Range;

use super::param::{ParamId, ParamStore};
use super::{split_axis, Tensor};
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    AddOuter(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    AddConst(Var),
    LeakyRelu(Var, f64),
    Relu(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    MaskedSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Concat {
        parts: Vec<(Var, usize)>,
        outer: usize,
        inner: usize,
    },
    Slice {
        x: Var,
        outer: usize,
        extent: usize,
        inner: usize,
        start: usize,
    },
    Mean {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Sum(Var),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    BceWithLogits(Var, Vec<f64>),
    StraightThrough(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation tape for one forward/backward pass.
///
/// Parameters are pulled in with [`Tape::param`], which copies the current
/// value; [`Tape::backward`] accumulates into [`ParamStore`] gradients.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    grads: Vec<Vec<f64>>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn expect_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::Shape {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![],
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// `out[m,n] = a[m,k] * b[k,n]`, accumulating into `out`.
fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aik = a[i * k + p];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = data[i * cols + j];
        }
    }
    out
}

fn acc(grads: &mut [Vec<f64>], v: Var, len: usize) -> &mut [f64] {
    let g = &mut grads[v.0];
    if g.is_empty() {
        *g = vec![0.0; len];
    }
    g
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

    fn kink_inputs(&self) -> impl Iterator<Item = f64> + '_ {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::LeakyRelu(a, _) | Op::Relu(a) => Some(a),
                _ => None,
            })
            .flat_map(|a| self.value(a).data().iter().copied())
    }

    /// Smallest distance to zero among the inputs of every ReLU and
    /// LeakyReLU on the tape; `INFINITY` without such nodes.
    pub fn kink_margin(&self) -> f64 {
        self.kink_inputs().map(f64::abs).fold(f64::INFINITY, f64::min)
    }

    /// Which side of zero every ReLU and LeakyReLU input lies on. Two passes
    /// with equal signatures lie on the same linear piece of every kink.
    pub fn kink_signature(&self) -> Vec<bool> {
        self.kink_inputs().map(|x| x > 0.0).collect()
    }

    /// Drops every node created after `len`. Handles above the mark become
    /// invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.params.retain(|_, v| v.0 < len);
        self.grads.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward's loss with respect to `v`, if any.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads
            .get(v.0)
            .filter(|g| !g.is_empty())
            .map(Vec::as_slice)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf whose gradient is recorded on the tape (see [`Tape::grad`]).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).value.clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    /// Copy of `x` cut off from the graph.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = expect_2d("matmul", ta)?;
        let (k2, n) = expect_2d("matmul", tb)?;
        if k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = expect_2d("transpose", t)?;
        let out = transpose(t.data(), m, n);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), rg))
    }

    fn zip_same(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds a `[1, n]` row to every row of `a` (`[m, n]`).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let (_, n) = expect_2d("add_row", ta)?;
        if tr.shape() != [1, n] {
            return Err(shape_err("add_row", ta, tr));
        }
        let r = tr.data();
        let data = ta
            .data()
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(x, y)| x + y))
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    /// `out[i, j] = col[i] + row[j]` for `col: [m, 1]`, `row: [1, n]`.
    pub fn add_outer(&mut self, col: Var, row: Var) -> Result<Var> {
        let (tc, tr) = (self.value(col), self.value(row));
        let (m, one) = expect_2d("add_outer", tc)?;
        let (one2, n) = expect_2d("add_outer", tr)?;
        if one != 1 || one2 != 1 {
            return Err(shape_err("add_outer", tc, tr));
        }
        let mut data = Vec::with_capacity(m * n);
        for &c in tc.data() {
            data.extend(tr.data().iter().map(|&r| c + r));
        }
        let rg = self.rg(col) || self.rg(row);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::AddOuter(col, row), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x * c).collect();
        let out = Tensor::new(t.shape().to_vec(), data).unwrap();
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// Element-wise product with a constant (e.g. a dropout mask).
    pub fn mul_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let t = self.value(a);
        if t.shape() != c.shape() {
            return Err(shape_err("mul_const", t, c));
        }
        let data = t.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::MulConst(a, c.data().to_vec()), rg))
    }

    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let t = self.value(a);
        if t.shape() != c.shape() {
            return Err(shape_err("add_const", t, c));
        }
        let data = t.data().iter().zip(c.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::AddConst(a), rg))
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::new(t.shape().to_vec(), data).unwrap();
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.map(a, Op::LeakyRelu(a, slope), |x| {
            if x >= 0.0 {
                x
            } else {
                slope * x
            }
        })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| x.max(0.0))
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::contract(format!(
                "softmax axis {axis} for shape {:?}",
                t.shape()
            )));
        }
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let max = (0..len)
                    .map(|k| src[idx(k)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for k in 0..len {
                    let e = (src[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    sum += e;
                }
                for k in 0..len {
                    out[idx(k)] /= sum;
                }
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    /// Row-wise softmax of a 2-D tensor restricted to `mask`; masked entries
    /// are exactly zero. Every row needs at least one unmasked entry.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = expect_2d("masked_softmax", t)?;
        if mask.len() != m * n {
            return Err(Error::Shape {
                op: "masked_softmax",
                lhs: t.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let src = t.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = i * n..(i + 1) * n;
            let (s, mk) = (&src[row.clone()], &mask[row.clone()]);
            let max = s
                .iter()
                .zip(mk)
                .filter(|(_, &keep)| keep)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::contract(format!(
                    "row {i} has an empty neighborhood"
                )));
            }
            let o = &mut out[row];
            let mut sum = 0.0;
            for j in 0..n {
                if mk[j] {
                    o[j] = (s[j] - max).exp();
                    sum += o[j];
                }
            }
            o.iter_mut().for_each(|v| *v /= sum);
        }
        let out = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::MaskedSoftmax(x), rg))
    }

    /// Layer normalization over the last axis; `gain` and `bias` are `[1, n]`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let n = tx.cols();
        if tg.len() != n || tb.len() != n {
            return Err(shape_err("layer_norm", tx, tg));
        }
        let rows = tx.len() / n;
        let mut xhat = vec![0.0; tx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = &tx.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let base = self.value(first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::contract(format!(
                "concat axis {axis} for shape {base:?}"
            )));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(ax, (a, b))| ax == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", self.value(first), self.value(p)));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let meta = parts
            .iter()
            .map(|&p| (p, self.value(p).shape()[axis]))
            .collect();
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                parts: meta,
                outer,
                inner,
            },
            rg,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, range: Range<usize>) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::contract(format!(
                "slice axis {axis} for shape {:?}",
                t.shape()
            )));
        }
        let extent = t.shape()[axis];
        if range.start >= range.end || range.end > extent {
            return Err(Error::Bounds {
                op: "slice",
                axis,
                start: range.start,
                end: range.end,
                extent,
            });
        }
        let (outer, _, inner) = split_axis(t.shape(), axis);
        let len = range.end - range.start;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + range.start) * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Slice {
                x,
                outer,
                extent,
                inner,
                start: range.start,
            },
            rg,
        ))
    }

    /// Mean along `axis`, keeping it as extent 1.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::contract(format!(
                "mean axis {axis} for shape {:?}",
                t.shape()
            )));
        }
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                for i in 0..inner {
                    data[o * inner + i] += t.data()[(o * len + k) * inner + i];
                }
            }
        }
        data.iter_mut().for_each(|v| *v /= len as f64);
        let mut shape = t.shape().to_vec();
        shape[axis] = 1;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Mean {
                x,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Rows of a 2-D `table` picked by `indices` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (rows, cols) = expect_2d("gather_rows", t)?;
        if indices.is_empty() {
            return Err(Error::contract("gather_rows with no indices"));
        }
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(Error::Bounds {
                    op: "gather_rows",
                    axis: 0,
                    start: i,
                    end: i + 1,
                    extent: rows,
                });
            }
            data.extend_from_slice(t.row(i));
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![indices.len(), cols], data)?,
            Op::GatherRows(table, indices.to_vec()),
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and `targets`,
    /// evaluated in the overflow-free logits form.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let t = self.value(logits);
        if t.shape() != targets.shape() {
            return Err(shape_err("bce_with_logits", t, targets));
        }
        let n = t.len() as f64;
        let loss = t
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits(logits, targets.data().to_vec()),
            rg,
        ))
    }

    /// Forward value is `hard`; the backward pass routes the incoming
    /// gradient to `soft` unchanged.
    pub fn straight_through(&mut self, soft: Var, hard: &Tensor) -> Result<Var> {
        let t = self.value(soft);
        if t.shape() != hard.shape() {
            return Err(shape_err("straight_through", t, hard));
        }
        let rg = self.rg(soft);
        Ok(self.push(hard.clone(), Op::StraightThrough(soft), rg))
    }

    /// Back-propagates from a scalar `loss`.
    ///
    /// Gradients accumulate into `store`: calling backward twice without
    /// zeroing adds both contributions. Every parameter pulled onto this tape
    /// ends up with a gradient, zero if the loss does not depend on it.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); self.nodes.len()];
        grads[loss.0] = vec![1.0];
        for id in (0..=loss.0).rev() {
            if grads[id].is_empty() || !self.nodes[id].requires_grad {
                continue;
            }
            let g = std::mem::take(&mut grads[id]);
            self.vjp(id, &g, &mut grads);
            if matches!(self.nodes[id].op, Op::Leaf | Op::Param) {
                grads[id] = g;
            }
        }
        for (&pid, &v) in &self.params {
            let p = store.get_mut(pid);
            if grads[v.0].is_empty() {
                p.accumulate(&vec![0.0; p.value.len()]);
            } else {
                p.accumulate(&grads[v.0]);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn vjp(&self, id: usize, g: &[f64], grads: &mut [Vec<f64>]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let len = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf | Op::Param => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.rg(a) {
                    let bt = transpose(val(b), k, n);
                    gemm_acc(g, &bt, acc(grads, a, m * k), m, n, k);
                }
                if self.rg(b) {
                    let at = transpose(val(a), m, k);
                    gemm_acc(&at, g, acc(grads, b, k * n), k, m, n);
                }
            }
            &Op::Transpose(a) => {
                let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
                let gt = transpose(g, n, m);
                acc(grads, a, m * n)
                    .iter_mut()
                    .zip(gt)
                    .for_each(|(d, s)| *d += s);
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if self.rg(v) {
                        acc(grads, v, g.len())
                            .iter_mut()
                            .zip(g)
                            .for_each(|(d, s)| *d += s);
                    }
                }
            }
            &Op::AddRow(a, row) => {
                if self.rg(a) {
                    acc(grads, a, g.len())
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, s)| *d += s);
                }
                if self.rg(row) {
                    let n = len(row);
                    let d = acc(grads, row, n);
                    for chunk in g.chunks(n) {
                        d.iter_mut().zip(chunk).for_each(|(d, s)| *d += s);
                    }
                }
            }
            &Op::AddOuter(col, row) => {
                let (m, n) = (len(col), len(row));
                if self.rg(col) {
                    let d = acc(grads, col, m);
                    for i in 0..m {
                        d[i] += g[i * n..(i + 1) * n].iter().sum::<f64>();
                    }
                }
                if self.rg(row) {
                    let d = acc(grads, row, n);
                    for chunk in g.chunks(n) {
                        d.iter_mut().zip(chunk).for_each(|(d, s)| *d += s);
                    }
                }
            }
            &Op::Mul(a, b) => {
                if self.rg(a) {
                    let vb = val(b);
                    acc(grads, a, g.len())
                        .iter_mut()
                        .enumerate()
                        .for_each(|(i, d)| *d += g[i] * vb[i]);
                }
                if self.rg(b) {
                    let va = val(a);
                    acc(grads, b, g.len())
                        .iter_mut()
                        .enumerate()
                        .for_each(|(i, d)| *d += g[i] * va[i]);
                }
            }
            &Op::Scale(a, c) => {
                acc(grads, a, g.len())
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, s)| *d += c * s);
            }
            Op::MulConst(a, c) => {
                acc(grads, *a, g.len())
                    .iter_mut()
                    .enumerate()
                    .for_each(|(i, d)| *d += g[i] * c[i]);
            }
            &Op::AddConst(a) | &Op::Reshape(a) | &Op::StraightThrough(a) => {
                acc(grads, a, g.len())
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, s)| *d += s);
            }
            &Op::LeakyRelu(a, slope) => {
                let x = val(a);
                acc(grads, a, g.len())
                    .iter_mut()
                    .enumerate()
                    .for_each(|(i, d)| {
                        *d += if x[i] >= 0.0 { g[i] } else { slope * g[i] };
                    });
            }
            &Op::Relu(a) => {
                let x = val(a);
                acc(grads, a, g.len())
                    .iter_mut()
                    .enumerate()
                    .for_each(|(i, d)| {
                        if x[i] > 0.0 {
                            *d += g[i];
                        }
                    });
            }
            &Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let d = acc(grads, x, g.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| out[idx(k)] * g[idx(k)]).sum();
                        for k in 0..len {
                            d[idx(k)] += out[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
            }
            &Op::MaskedSoftmax(x) => {
                let n = node.value.cols();
                let d = acc(grads, x, g.len());
                for (r, (yr, gr)) in out.chunks(n).zip(g.chunks(n)).enumerate() {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..n {
                        d[r * n + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = node.value.cols();
                let gv = val(*gain).to_vec();
                if self.rg(*gain) {
                    let d = acc(grads, *gain, n);
                    for (r, gr) in g.chunks(n).enumerate() {
                        for j in 0..n {
                            d[j] += gr[j] * xhat[r * n + j];
                        }
                    }
                }
                if self.rg(*bias) {
                    let d = acc(grads, *bias, n);
                    for gr in g.chunks(n) {
                        d.iter_mut().zip(gr).for_each(|(d, s)| *d += s);
                    }
                }
                if self.rg(*x) {
                    let d = acc(grads, *x, g.len());
                    let nf = n as f64;
                    for (r, gr) in g.chunks(n).enumerate() {
                        let xh = &xhat[r * n..(r + 1) * n];
                        let dxhat: Vec<f64> = (0..n).map(|j| gr[j] * gv[j]).collect();
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            d[r * n + j] += inv_std[r] / nf * (nf * dxhat[j] - s1 - xh[j] * s2);
                        }
                    }
                }
            }
            Op::Concat {
                parts,
                outer,
                inner,
            } => {
                let total: usize = parts.iter().map(|(_, e)| e).sum();
                let mut offset = 0;
                for &(p, extent) in parts {
                    let block = extent * inner;
                    if self.rg(p) {
                        let d = acc(grads, p, outer * block);
                        for o in 0..*outer {
                            let src = o * total * inner + offset;
                            d[o * block..(o + 1) * block]
                                .iter_mut()
                                .zip(&g[src..src + block])
                                .for_each(|(d, s)| *d += s);
                        }
                    }
                    offset += block;
                }
            }
            &Op::Slice {
                x,
                outer,
                extent,
                inner,
                start,
            } => {
                let width = g.len() / outer;
                let d = acc(grads, x, outer * extent * inner);
                for o in 0..outer {
                    let base = (o * extent + start) * inner;
                    d[base..base + width]
                        .iter_mut()
                        .zip(&g[o * width..(o + 1) * width])
                        .for_each(|(d, s)| *d += s);
                }
            }
            &Op::Mean {
                x,
                outer,
                len,
                inner,
            } => {
                let d = acc(grads, x, outer * len * inner);
                let scale = 1.0 / len as f64;
                for o in 0..outer {
                    for k in 0..len {
                        for i in 0..inner {
                            d[(o * len + k) * inner + i] += g[o * inner + i] * scale;
                        }
                    }
                }
            }
            &Op::Sum(x) => {
                acc(grads, x, len(x)).iter_mut().for_each(|d| *d += g[0]);
            }
            Op::GatherRows(table, indices) => {
                let cols = self.value(*table).cols();
                let d = acc(grads, *table, len(*table));
                for (r, &i) in indices.iter().enumerate() {
                    d[i * cols..(i + 1) * cols]
                        .iter_mut()
                        .zip(&g[r * cols..(r + 1) * cols])
                        .for_each(|(d, s)| *d += s);
                }
            }
            Op::BceWithLogits(logits, targets) => {
                let x = val(*logits);
                let n = x.len() as f64;
                acc(grads, *logits, x.len())
                    .iter_mut()
                    .enumerate()
                    .for_each(|(i, d)| *d += g[0] * (sigmoid(x[i]) - targets[i]) / n);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(sigmoid(x))` without overflow.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut tape = Tape::new();
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let c = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(c).data(), &[5.0, 6.0, 7.0, 8.0]);
        let x = tape.constant(Tensor::scalar(2.0).reshaped(&[1, 1]).unwrap());
        let y = tape.constant(Tensor::scalar(3.0).reshaped(&[1, 1]).unwrap());
        let z = tape.matmul(x, y).unwrap();
        assert_eq!(tape.value(z).data(), &[6.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_symmetric_and_stable() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(t(&[2], &[1000.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data()[0], 1.0);
        assert!(tape.value(y).data()[1] < 1e-300);
    }

    #[test]
    fn softmax_matches_scalar_reference() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let y = tape.softmax(x, 0).unwrap();
        let denom = (-2f64).exp() + (-1f64).exp() + 1.0;
        let want = [(-2f64).exp() / denom, (-1f64).exp() / denom, 1.0 / denom];
        for (a, b) in tape.value(y).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_along_first_axis() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[0.0, 5.0, 0.0, -5.0]));
        let y = tape.softmax(x, 0).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 0.5).abs() < 1e-15 && (v[2] - 0.5).abs() < 1e-15);
        assert!((v[1] + v[3] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn masked_softmax_zero_outside_mask() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = tape
            .masked_softmax(x, &[true, false, true, false, true, false])
            .unwrap();
        let v = tape.value(y).data();
        assert_eq!(v[1], 0.0);
        assert_eq!(v[3], 0.0);
        assert_eq!(v[5], 0.0);
        assert_eq!(v[4], 1.0);
        assert!((v[0] + v[2] - 1.0).abs() < 1e-15);
        assert!(tape.masked_softmax(x, &[false; 6]).is_err());
    }

    #[test]
    fn layer_norm_closed_forms() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::ones(&[1, 3]));
        let b = tape.constant(Tensor::zeros(&[1, 3]));
        let x = tape.constant(t(&[1, 3], &[4.0, 4.0, 4.0]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);

        let g = tape.constant(Tensor::ones(&[1, 2]));
        let b = tape.constant(Tensor::zeros(&[1, 2]));
        let x = tape.constant(t(&[1, 2], &[1.0, -1.0]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        let want = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((tape.value(y).data()[0] - want).abs() < 1e-12);
        assert!((tape.value(y).data()[1] + want).abs() < 1e-12);
    }

    #[test]
    fn leaky_relu_definition() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[0.0, -1.0, 2.0]));
        let y = tape.leaky_relu(x, 0.2);
        assert_eq!(tape.value(y).data(), &[0.0, -0.2, 2.0]);
    }

    #[test]
    fn concat_slice_round_trip_and_bounds() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::full(&[2, 4], 1.0));
        let b = tape.constant(Tensor::full(&[3, 4], 2.0));
        let c = tape.concat(&[a, b], 0).unwrap();
        assert_eq!(tape.shape(c), &[5, 4]);
        let s = tape.slice(c, 0, 0..2).unwrap();
        assert_eq!(tape.value(s), tape.value(a));
        assert!(matches!(tape.slice(c, 0, 3..6), Err(Error::Bounds { .. })));
    }

    #[test]
    fn sum_of_param_has_unit_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::full(&[2, 3], 0.5)).unwrap();
        let mut tape = Tape::new();
        let p = tape.param(&store, id);
        let l = tape.sum(p);
        tape.backward(l, &mut store).unwrap();
        assert_eq!(store.get(id).grad.as_deref(), Some(&[1.0; 6][..]));
        // accumulates on a second pass
        let mut tape = Tape::new();
        let p = tape.param(&store, id);
        let l = tape.sum(p);
        tape.backward(l, &mut store).unwrap();
        assert_eq!(store.get(id).grad.as_deref(), Some(&[2.0; 6][..]));
    }

    #[test]
    fn detached_branch_gets_zero_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::full(&[1, 2], 3.0)).unwrap();
        let mut tape = Tape::new();
        let p = tape.param(&store, id);
        let d = tape.detach(p);
        let sq = tape.mul(d, d).unwrap();
        let l = tape.sum(sq);
        tape.backward(l, &mut store).unwrap();
        assert_eq!(store.get(id).grad.as_deref(), Some(&[0.0, 0.0][..]));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[2]));
        assert!(matches!(
            tape.backward(x, &mut store),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn straight_through_forward_is_hard() {
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let s = tape.input(t(&[1, 2], &[0.3, 0.7]));
        let hard = t(&[1, 2], &[0.0, 1.0]);
        let y = tape.straight_through(s, &hard).unwrap();
        assert_eq!(tape.value(y), &hard);
        let w = tape.constant(t(&[1, 2], &[2.0, 5.0]));
        let p = tape.mul(y, w).unwrap();
        let l = tape.sum(p);
        tape.backward(l, &mut store).unwrap();
        assert_eq!(tape.grad(s).unwrap(), &[2.0, 5.0]);
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(0.0) - 0.5f64.ln()).abs() < 1e-15);
        assert!(log_sigmoid(-1000.0).is_finite());
        assert_eq!(log_sigmoid(1000.0), 0.0);
        assert!((sigmoid(2.0) - 1.0 / (1.0 + (-2f64).exp())).abs() < 1e-15);
    }
}
