//! Tape-based reverse-mode automatic differentiation.
//!
//! Every primitive executed through a [`Tape`] records its inputs and
//! whatever it needs to compute a vector-Jacobian product. [`Tape::backward`]
//! replays the record in reverse and returns the gradient of a scalar loss
//! with respect to every parameter that entered the computation.
//!
//! A tape is single-use: once `backward` has run, it refuses to run again
//! until a new forward pass is recorded on a fresh tape.

use std::collections::HashMap;

use crate::error::{AutodiffError, Result};
use crate::param::{ParamId, Parameter};
use crate::tensor::{matmul_nt_raw, matmul_raw, matmul_tn_raw, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Softmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    MeanRows {
        x: Var,
        start: usize,
        end: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
    },
    Rotary {
        x: Var,
        cos: Vec<f64>,
        sin: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    /// Whether any trainable parameter lies upstream.
    needs_grad: bool,
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf | Param(_) => vec![],
            MatMul(a, b) | MatMulNt(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) => vec![*a, *b],
            Transpose(a) | Scale(a, _) | Sum(a) | Gelu(a) | Tanh(a) | Sigmoid(a) => vec![*a],
            Softmax { x } | SliceRows { x, .. } | SliceCols { x, .. } | MeanRows { x, .. } | Rotary { x, .. } => {
                vec![*x]
            }
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            GatherRows { table, .. } => vec![*table],
            ConcatRows(v) | ConcatCols(v) => v.clone(),
            CrossEntropy { logits, .. } | BceWithLogits { logits, .. } => vec![*logits],
        }
    }
}

/// Gradients of a loss with respect to the parameters on a tape, ordered by id.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads
            .binary_search_by_key(&id, |(i, _)| *i)
            .ok()
            .map(|k| &self.grads[k].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().map(|(i, t)| (*i, t))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Records a forward computation for later differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    consumed: bool,
    flops: u64,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn matrix(shape: &[usize]) -> Option<(usize, usize)> {
    (shape.len() == 2).then(|| (shape[0], shape[1]))
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

    /// Multiply-add count of the matrix products recorded so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: name });
        }
        let needs_grad = match op {
            Op::Param(_) => false,
            _ => op.inputs().iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant input. Receives no gradient outside the tape.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, "constant")
    }

    /// Records a parameter; repeated calls with the same id return the same `Var`.
    pub fn param(&mut self, id: ParamId, p: &Parameter) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let v = self.push(p.value.clone(), Op::Param(id), "param")?;
        // Frozen parameters pass gradients through but receive none.
        self.nodes[v.0].needs_grad = p.trainable;
        self.params.insert(id, v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        match (matrix(ta.shape()), matrix(tb.shape())) {
            (Some((m, k)), Some((k2, n))) if k == k2 => {
                let out = matmul_raw(ta.data(), tb.data(), m, k, n);
                self.flops += (m * k * n) as u64;
                self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), "matmul")
            }
            _ => Err(shape_err("matmul", ta, tb)),
        }
    }

    /// `a * b^T` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        match (matrix(ta.shape()), matrix(tb.shape())) {
            (Some((m, k)), Some((n, k2))) if k == k2 => {
                let out = matmul_nt_raw(ta.data(), tb.data(), m, k, n);
                self.flops += (m * k * n) as u64;
                self.push(
                    Tensor::new(vec![m, n], out)?,
                    Op::MatMulNt(a, b),
                    "matmul_nt",
                )
            }
            _ => Err(shape_err("matmul_nt", ta, tb)),
        }
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if matrix(ta.shape()).is_none() {
            return Err(shape_err("transpose", ta, ta));
        }
        let out = ta.transpose();
        self.push(out, Op::Transpose(a), "transpose")
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`n` vector to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let n = ta.cols();
        if matrix(ta.shape()).is_none() || tr.len() != n {
            return Err(shape_err("add_row", ta, tr));
        }
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (d, r) in chunk.iter_mut().zip(tr.data()) {
                *d += r;
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, Op::AddRow(a, row), "add_row")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * c).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, Op::Scale(a, c), "scale")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_masked(x, None)
    }

    /// Row-wise softmax where `allowed[i*n + j] == false` forces a zero
    /// probability. Every row must keep at least one entry.
    pub fn softmax_masked(&mut self, x: Var, allowed: Option<&[bool]>) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = (tx.rows(), tx.cols());
        if let Some(mask) = allowed {
            if mask.len() != m * n {
                return Err(AutodiffError::Shape {
                    op: "softmax_masked",
                    lhs: tx.shape().to_vec(),
                    rhs: vec![mask.len()],
                });
            }
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = tx.row(i);
            let ok = |j: usize| allowed.is_none_or(|mk| mk[i * n + j]);
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if ok(j) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(AutodiffError::EmptyMaskRow { row: i });
            }
            let mut z = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if ok(j) {
                    let e = (v - max).exp();
                    out[i * n + j] = e;
                    z += e;
                }
            }
            for o in &mut out[i * n..(i + 1) * n] {
                *o /= z;
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        self.push(out, Op::Softmax { x }, "softmax")
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = (tx.rows(), tx.cols());
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.len() != n || tb.len() != n {
            return Err(shape_err("layer_norm", tx, tg));
        }
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = tx.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            "layer_norm",
        )
    }

    fn map(&mut self, a: Var, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| f(*x)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, op, name)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.map(a, "gelu", gelu, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map(a, "tanh", f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map(a, "sigmoid", sigmoid, Op::Sigmoid(a))
    }

    /// Selects rows of a `[v, d]` table, producing `[ids.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (v, d) = matrix(tt.shape()).ok_or_else(|| shape_err("gather_rows", tt, tt))?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(AutodiffError::Index {
                    op: "gather_rows",
                    index: id,
                    size: v,
                });
            }
            out.extend_from_slice(tt.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], out)?;
        self.push(
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            "gather_rows",
        )
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(AutodiffError::EmptyTape)?;
        let d = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if matrix(t.shape()).is_none() || t.cols() != d {
                return Err(shape_err("concat_rows", self.value(*first), t));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![rows, d], data)?;
        self.push(out, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(AutodiffError::EmptyTape)?;
        let m = self.value(*first).rows();
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols()).collect();
        for &p in parts {
            let t = self.value(p);
            if matrix(t.shape()).is_none() || t.rows() != m {
                return Err(shape_err("concat_cols", self.value(*first), t));
            }
        }
        let n: usize = widths.iter().sum();
        let mut data = vec![0.0; m * n];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = self.value(p);
            for i in 0..m {
                data[i * n + offset..i * n + offset + w].copy_from_slice(t.row(i));
            }
            offset += w;
        }
        let out = Tensor::new(vec![m, n], data)?;
        self.push(out, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = matrix(tx.shape()).ok_or_else(|| shape_err("slice_rows", tx, tx))?;
        if start > end || end > m {
            return Err(AutodiffError::Index {
                op: "slice_rows",
                index: end,
                size: m,
            });
        }
        let out = Tensor::new(vec![end - start, n], tx.data()[start * n..end * n].to_vec())?;
        self.push(out, Op::SliceRows { x, start }, "slice_rows")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = matrix(tx.shape()).ok_or_else(|| shape_err("slice_cols", tx, tx))?;
        if start > end || end > n {
            return Err(AutodiffError::Index {
                op: "slice_cols",
                index: end,
                size: n,
            });
        }
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&tx.row(i)[start..end]);
        }
        let out = Tensor::new(vec![m, w], data)?;
        self.push(out, Op::SliceCols { x, start }, "slice_cols")
    }

    /// Mean of rows `start..end`, as a `[1, d]` matrix.
    pub fn mean_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = matrix(tx.shape()).ok_or_else(|| shape_err("mean_rows", tx, tx))?;
        if start >= end || end > m {
            return Err(AutodiffError::Index {
                op: "mean_rows",
                index: end,
                size: m,
            });
        }
        let mut out = vec![0.0; n];
        for i in start..end {
            for (o, v) in out.iter_mut().zip(tx.row(i)) {
                *o += v;
            }
        }
        let k = (end - start) as f64;
        out.iter_mut().for_each(|o| *o /= k);
        let out = Tensor::new(vec![1, n], out)?;
        self.push(out, Op::MeanRows { x, start, end }, "mean_rows")
    }

    /// Mean softmax cross-entropy of `[n, v]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (m, v) = matrix(tl.shape()).ok_or_else(|| shape_err("cross_entropy", tl, tl))?;
        if targets.len() != m || m == 0 {
            return Err(AutodiffError::Shape {
                op: "cross_entropy",
                lhs: tl.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut probs = vec![0.0; m * v];
        let mut loss = 0.0;
        for i in 0..m {
            let row = tl.row(i);
            let t = targets[i];
            if t >= v {
                return Err(AutodiffError::Index {
                    op: "cross_entropy",
                    index: t,
                    size: v,
                });
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let log_z = max + z.ln();
            loss += log_z - row[t];
            for j in 0..v {
                probs[i * v + j] = (row[j] - log_z).exp();
            }
        }
        let out = Tensor::scalar(loss / m as f64);
        self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            "cross_entropy",
        )
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and targets in `[0, 1]`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let tl = self.value(logits);
        if tl.len() != targets.len() || targets.is_empty() {
            return Err(AutodiffError::Shape {
                op: "bce_with_logits",
                lhs: tl.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let loss: f64 = tl
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / targets.len() as f64;
        self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            "bce_with_logits",
        )
    }

    /// Rotary position embedding over consecutive column pairs of an
    /// `[n, d]` matrix, row `i` rotated by `positions[i]`.
    pub fn rotary(&mut self, x: Var, positions: &[usize], base: f64) -> Result<Var> {
        let tx = self.value(x);
        let (m, d) = matrix(tx.shape()).ok_or_else(|| shape_err("rotary", tx, tx))?;
        if positions.len() != m || d % 2 != 0 {
            return Err(AutodiffError::Shape {
                op: "rotary",
                lhs: tx.shape().to_vec(),
                rhs: vec![positions.len()],
            });
        }
        let half = d / 2;
        let mut cos = vec![0.0; m * half];
        let mut sin = vec![0.0; m * half];
        let mut out = vec![0.0; m * d];
        for (i, &pos) in positions.iter().enumerate() {
            let row = tx.row(i);
            for k in 0..half {
                let freq = base.powf(-2.0 * k as f64 / d as f64);
                let (s, c) = (pos as f64 * freq).sin_cos();
                cos[i * half + k] = c;
                sin[i * half + k] = s;
                let (a, b) = (row[2 * k], row[2 * k + 1]);
                out[i * d + 2 * k] = a * c - b * s;
                out[i * d + 2 * k + 1] = a * s + b * c;
            }
        }
        let out = Tensor::new(vec![m, d], out)?;
        self.push(out, Op::Rotary { x, cos, sin }, "rotary")
    }

    /// Back-propagates from a scalar `loss`, returning parameter gradients.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(AutodiffError::StaleTape);
        }
        if self.nodes.is_empty() {
            return Err(AutodiffError::EmptyTape);
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(AutodiffError::NotScalar(lv.shape().to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Vec::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let nodes = &self.nodes;
            let need = |v: Var| nodes[v.0].needs_grad;
            let mut send = |v: Var, d: Vec<f64>| {
                if !nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(d),
                }
            };
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    out.push((*id, Tensor::new(node.value.shape().to_vec(), g)?));
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    if need(*a) {
                        send(*a, matmul_nt_raw(&g, tb.data(), m, n, k));
                    }
                    if need(*b) {
                        send(*b, matmul_tn_raw(ta.data(), &g, m, k, n));
                    }
                }
                Op::MatMulNt(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                    if need(*a) {
                        send(*a, matmul_raw(&g, tb.data(), m, n, k));
                    }
                    if need(*b) {
                        send(*b, matmul_tn_raw(&g, ta.data(), m, n, k));
                    }
                }
                Op::Transpose(a) => {
                    let (m, n) = (node.value.rows(), node.value.cols());
                    let gt = Tensor::new(vec![m, n], g)?.transpose();
                    send(*a, gt.into_data());
                }
                Op::Add(a, b) => {
                    send(*b, g.clone());
                    send(*a, g);
                }
                Op::Sub(a, b) => {
                    send(*b, g.iter().map(|x| -x).collect());
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.iter().zip(val(*b).data()).map(|(x, y)| x * y).collect();
                    let gb = g.iter().zip(val(*a).data()).map(|(x, y)| x * y).collect();
                    send(*a, ga);
                    send(*b, gb);
                }
                Op::AddRow(a, row) => {
                    let n = node.value.cols();
                    let mut gr = vec![0.0; n];
                    for chunk in g.chunks(n) {
                        gr.iter_mut().zip(chunk).for_each(|(r, c)| *r += c);
                    }
                    send(*row, gr);
                    send(*a, g);
                }
                Op::Scale(a, c) => send(*a, g.iter().map(|x| x * c).collect()),
                Op::Sum(a) => send(*a, vec![g[0]; val(*a).len()]),
                Op::Softmax { x } => {
                    let y = &node.value;
                    let n = y.cols();
                    let mut gx = vec![0.0; y.len()];
                    for i in 0..y.rows() {
                        let yr = y.row(i);
                        let gr = &g[i * n..(i + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gx[i * n + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    send(*x, gx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let n = node.value.cols();
                    let m = node.value.rows();
                    let gamma = val(*gain).data();
                    let mut gx = vec![0.0; m * n];
                    let mut gg = vec![0.0; n];
                    let mut gb = vec![0.0; n];
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        let xr = &xhat[i * n..(i + 1) * n];
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..n {
                            gg[j] += gr[j] * xr[j];
                            gb[j] += gr[j];
                            let d = gr[j] * gamma[j];
                            sum_d += d;
                            sum_dx += d * xr[j];
                        }
                        let nf = n as f64;
                        for j in 0..n {
                            let d = gr[j] * gamma[j];
                            gx[i * n + j] = inv_std[i] / nf * (nf * d - sum_d - xr[j] * sum_dx);
                        }
                    }
                    send(*gain, gg);
                    send(*bias, gb);
                    send(*x, gx);
                }
                Op::Gelu(a) => {
                    let gx = g
                        .iter()
                        .zip(val(*a).data())
                        .map(|(d, x)| d * gelu_grad(*x))
                        .collect();
                    send(*a, gx);
                }
                Op::Tanh(a) => {
                    let gx = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(d, y)| d * (1.0 - y * y))
                        .collect();
                    send(*a, gx);
                }
                Op::Sigmoid(a) => {
                    let gx = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(d, y)| d * y * (1.0 - y))
                        .collect();
                    send(*a, gx);
                }
                Op::GatherRows { table, ids } => {
                    let tt = val(*table);
                    let d = tt.cols();
                    let mut gt = vec![0.0; tt.len()];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[r * d + j];
                        }
                    }
                    send(*table, gt);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = val(p).len();
                        send(p, g[offset..offset + len].to_vec());
                        offset += len;
                    }
                }
                Op::ConcatCols(parts) => {
                    let n = node.value.cols();
                    let m = node.value.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let w = val(p).cols();
                        let mut gp = Vec::with_capacity(m * w);
                        for i in 0..m {
                            gp.extend_from_slice(&g[i * n + offset..i * n + offset + w]);
                        }
                        send(p, gp);
                        offset += w;
                    }
                }
                Op::SliceRows { x, start } => {
                    let tx = val(*x);
                    let n = tx.cols();
                    let mut gx = vec![0.0; tx.len()];
                    gx[start * n..start * n + g.len()].copy_from_slice(&g);
                    send(*x, gx);
                }
                Op::SliceCols { x, start } => {
                    let tx = val(*x);
                    let n = tx.cols();
                    let w = node.value.cols();
                    let mut gx = vec![0.0; tx.len()];
                    for i in 0..tx.rows() {
                        gx[i * n + start..i * n + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                    }
                    send(*x, gx);
                }
                Op::MeanRows { x, start, end } => {
                    let tx = val(*x);
                    let n = tx.cols();
                    let k = (end - start) as f64;
                    let mut gx = vec![0.0; tx.len()];
                    for i in *start..*end {
                        for j in 0..n {
                            gx[i * n + j] = g[j] / k;
                        }
                    }
                    send(*x, gx);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let m = targets.len();
                    let v = probs.len() / m;
                    let scale = g[0] / m as f64;
                    let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (i, &t) in targets.iter().enumerate() {
                        gl[i * v + t] -= scale;
                    }
                    send(*logits, gl);
                }
                Op::BceWithLogits { logits, targets } => {
                    let scale = g[0] / targets.len() as f64;
                    let gl = val(*logits)
                        .data()
                        .iter()
                        .zip(targets)
                        .map(|(&z, &y)| (sigmoid(z) - y) * scale)
                        .collect();
                    send(*logits, gl);
                }
                Op::Rotary { x, cos, sin } => {
                    let d = node.value.cols();
                    let half = d / 2;
                    let mut gx = vec![0.0; g.len()];
                    for i in 0..node.value.rows() {
                        for k in 0..half {
                            let (c, s) = (cos[i * half + k], sin[i * half + k]);
                            let (ga, gb) = (g[i * d + 2 * k], g[i * d + 2 * k + 1]);
                            gx[i * d + 2 * k] = ga * c + gb * s;
                            gx[i * d + 2 * k + 1] = -ga * s + gb * c;
                        }
                    }
                    send(*x, gx);
                }
            }
        }
        out.sort_by_key(|(id, _)| *id);
        Ok(Gradients { grads: out })
    }
}
