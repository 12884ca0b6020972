//! Dynamic reverse-mode tape.
//!
//! A [`Graph`] is rebuilt for every forward pass. Nodes are appended in
//! evaluation order, so parents always precede children and `backward` is a
//! single reverse sweep.

use super::tensor::{dot, Tensor};
use super::GradError;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Detach,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    SoftmaxRows(Var),
    RmsNormRows {
        x: Var,
        eps: f64,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Mse(Var, Var),
    Sum(Var),
    SegmentAttention {
        q: Var,
        k: Var,
        v: Var,
        seg: usize,
        scale: f64,
        /// Attention weights per segment, `seg × seg` each, stacked row-wise.
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when nothing flowed
    /// into it (including when it is only reachable through a detach).
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn has(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.tracked(v)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Untracked leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Same value, no gradient flows back through this edge.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::Detach, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let value = self.value(a).matmul_bt(self.value(b))?;
        let rg = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::MatMulBt(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(), GradError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(GradError::Shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.same_shape(a, b, "add")?;
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let rg = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.same_shape(a, b, "sub")?;
        let mut value = self.value(a).clone();
        for (x, y) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *x -= y;
        }
        let rg = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let mut value = self.value(x).clone();
        value.data_mut().iter_mut().for_each(|v| *v *= s);
        let rg = self.tracked(x);
        self.push(value, Op::Scale(x, s), rg)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let value = softmax_rows(self.value(x));
        let rg = self.tracked(x);
        self.push(value, Op::SoftmaxRows(x), rg)
    }

    /// Row-wise RMS normalization without any gain.
    pub fn rms_norm_rows(&mut self, x: Var, eps: f64) -> Var {
        let src = self.value(x);
        let (r, c) = (src.rows(), src.cols());
        let mut out = src.clone();
        for i in 0..r {
            let row = out.row_mut(i);
            let inv = 1.0 / rms(row, eps);
            row.iter_mut().for_each(|v| *v *= inv);
        }
        debug_assert_eq!(out.cols(), c);
        let rg = self.tracked(x);
        self.push(out, Op::RmsNormRows { x, eps }, rg)
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, GradError> {
        let value = self.value(x).gather_rows(rows)?;
        let rg = self.tracked(x);
        Ok(self.push(value, Op::GatherRows { x, rows: rows.to_vec() }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, GradError> {
        let first = parts
            .first()
            .ok_or_else(|| GradError::Shape("concat of zero tensors".into()))?;
        let rows = self.value(*first).rows();
        let mut total = 0;
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(GradError::Shape(format!(
                    "concat rows {} vs {rows}",
                    self.value(p).rows()
                )));
            }
            total += self.value(p).cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::matrix(rows, total, data)?;
        let rg = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Columns `start..end` of `x`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, GradError> {
        let src = self.value(x);
        if start > end || end > src.cols() {
            return Err(GradError::Shape(format!(
                "slice {start}..{end} of {} columns",
                src.cols()
            )));
        }
        let mut data = Vec::with_capacity(src.rows() * (end - start));
        for i in 0..src.rows() {
            data.extend_from_slice(&src.row(i)[start..end]);
        }
        let value = Tensor::matrix(src.rows(), end - start, data)?;
        let rg = self.tracked(x);
        Ok(self.push(value, Op::SliceCols { x, start }, rg))
    }

    /// Mean squared error over every element.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var, GradError> {
        self.same_shape(pred, target, "mse")?;
        let (p, t) = (self.value(pred), self.value(target));
        let n = p.numel().max(1) as f64;
        let total: f64 = p.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        let rg = self.tracked(pred) || self.tracked(target);
        Ok(self.push(Tensor::scalar(total / n), Op::Mse(pred, target), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.tracked(x);
        self.push(value, Op::Sum(x), rg)
    }

    /// Token-token attention applied independently to consecutive blocks of
    /// `seg` rows: `softmax(q kᵀ · scale) v` per block.
    pub fn segment_attention(&mut self, q: Var, k: Var, v: Var, seg: usize, scale: f64) -> Result<Var, GradError> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let rows = qv.rows();
        if seg == 0 || rows % seg != 0 || kv.rows() != rows || vv.rows() != rows {
            return Err(GradError::Shape(format!(
                "segment attention over {rows} rows with segment {seg}"
            )));
        }
        if qv.cols() != kv.cols() {
            return Err(GradError::Shape(format!(
                "query width {} vs key width {}",
                qv.cols(),
                kv.cols()
            )));
        }
        let dv = vv.cols();
        let mut probs = vec![0.0; rows * seg];
        let mut out = vec![0.0; rows * dv];
        for s in 0..rows / seg {
            let base = s * seg;
            for i in 0..seg {
                let p_row = &mut probs[(base + i) * seg..(base + i + 1) * seg];
                for (j, p) in p_row.iter_mut().enumerate() {
                    *p = dot(qv.row(base + i), kv.row(base + j)) * scale;
                }
                softmax_in_place(p_row);
                let o_row = &mut out[(base + i) * dv..(base + i + 1) * dv];
                for (j, &p) in p_row.iter().enumerate() {
                    for (o, &x) in o_row.iter_mut().zip(vv.row(base + j)) {
                        *o += p * x;
                    }
                }
            }
        }
        let value = Tensor::matrix(rows, dv, out)?;
        let rg = self.tracked(q) || self.tracked(k) || self.tracked(v);
        Ok(self.push(
            value,
            Op::SegmentAttention {
                q,
                k,
                v,
                seg,
                scale,
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, GradError> {
        if self.value(loss).numel() != 1 {
            return Err(GradError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        let shapes = self
            .nodes
            .iter()
            .map(|node| (node.value.rows(), node.value.cols()))
            .collect();
        if self.tracked(loss) {
            grads[loss.0] = Some(Tensor::filled(1, 1, 1.0));
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.tracked(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<(), GradError> {
        match op {
            Op::Leaf | Op::Detach => {}
            Op::MatMul(a, b) => {
                if self.tracked(*a) {
                    let ga = g.matmul_bt(self.value(*b))?;
                    self.accumulate(grads, *a, ga);
                }
                if self.tracked(*b) {
                    let gb = self.value(*a).matmul_at(g)?;
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::MatMulBt(a, b) => {
                if self.tracked(*a) {
                    let ga = g.matmul(self.value(*b))?;
                    self.accumulate(grads, *a, ga);
                }
                if self.tracked(*b) {
                    let gb = g.matmul_at(self.value(*a))?;
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                let mut neg = g.clone();
                neg.data_mut().iter_mut().for_each(|v| *v = -*v);
                self.accumulate(grads, *b, neg);
            }
            Op::Scale(x, s) => {
                let mut gx = g.clone();
                gx.data_mut().iter_mut().for_each(|v| *v *= s);
                self.accumulate(grads, *x, gx);
            }
            Op::SoftmaxRows(x) => {
                let mut gx = g.clone();
                for i in 0..out.rows() {
                    softmax_backward_in_place(out.row(i), gx.row_mut(i));
                }
                self.accumulate(grads, *x, gx);
            }
            Op::RmsNormRows { x, eps } => {
                let src = self.value(*x);
                let c = src.cols() as f64;
                let mut gx = g.clone();
                for i in 0..src.rows() {
                    let r = rms(src.row(i), *eps);
                    let y = out.row(i);
                    let gy_row = gx.row_mut(i);
                    let proj = dot(gy_row, y) / c;
                    for (gv, &yv) in gy_row.iter_mut().zip(y) {
                        *gv = (*gv - yv * proj) / r;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::GatherRows { x, rows } => {
                let src = self.value(*x);
                let mut gx = Tensor::zeros(src.rows(), src.cols());
                for (i, &r) in rows.iter().enumerate() {
                    for (a, b) in gx.row_mut(r).iter_mut().zip(g.row(i)) {
                        *a += b;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.tracked(p) {
                        let mut data = Vec::with_capacity(g.rows() * w);
                        for i in 0..g.rows() {
                            data.extend_from_slice(&g.row(i)[offset..offset + w]);
                        }
                        self.accumulate(grads, p, Tensor::matrix(g.rows(), w, data)?);
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let src = self.value(*x);
                let mut gx = Tensor::zeros(src.rows(), src.cols());
                for i in 0..g.rows() {
                    let w = g.cols();
                    gx.row_mut(i)[*start..*start + w].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Mse(p, t) => {
                let (pv, tv) = (self.value(*p), self.value(*t));
                let scale = 2.0 * g.data()[0] / pv.numel().max(1) as f64;
                let diff: Vec<f64> = pv.data().iter().zip(tv.data()).map(|(a, b)| (a - b) * scale).collect();
                let gp = Tensor::new(pv.shape().to_vec(), diff)?;
                if self.tracked(*t) {
                    let mut gt = gp.clone();
                    gt.data_mut().iter_mut().for_each(|v| *v = -*v);
                    self.accumulate(grads, *t, gt);
                }
                self.accumulate(grads, *p, gp);
            }
            Op::Sum(x) => {
                let src = self.value(*x);
                let gx = Tensor::new(src.shape().to_vec(), vec![g.data()[0]; src.numel()])?;
                self.accumulate(grads, *x, gx);
            }
            Op::SegmentAttention {
                q,
                k,
                v,
                seg,
                scale,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (rows, dq, dv) = (qv.rows(), qv.cols(), vv.cols());
                let seg = *seg;
                let mut gq = Tensor::zeros(rows, dq);
                let mut gk = Tensor::zeros(rows, dq);
                let mut gvv = Tensor::zeros(rows, dv);
                let mut dz = vec![0.0; seg];
                for s in 0..rows / seg {
                    let base = s * seg;
                    for i in 0..seg {
                        let p_row = &probs[(base + i) * seg..(base + i + 1) * seg];
                        let g_row = g.row(base + i);
                        for (j, &p) in p_row.iter().enumerate() {
                            dz[j] = dot(g_row, vv.row(base + j));
                            for (a, &b) in gvv.row_mut(base + j).iter_mut().zip(g_row) {
                                *a += p * b;
                            }
                        }
                        softmax_backward_in_place(p_row, &mut dz);
                        for (j, &z) in dz.iter().enumerate() {
                            let z = z * scale;
                            for (a, &b) in gq.row_mut(base + i).iter_mut().zip(kv.row(base + j)) {
                                *a += z * b;
                            }
                            for (a, &b) in gk.row_mut(base + j).iter_mut().zip(qv.row(base + i)) {
                                *a += z * b;
                            }
                        }
                    }
                }
                self.accumulate(grads, *q, gq);
                self.accumulate(grads, *k, gk);
                self.accumulate(grads, *v, gvv);
            }
        }
        Ok(())
    }
}

fn rms(row: &[f64], eps: f64) -> f64 {
    (dot(row, row) / row.len().max(1) as f64 + eps).sqrt()
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = 1.0 / total;
    row.iter_mut().for_each(|v| *v *= inv);
}

/// Turns `dy` into `dx` for a softmax whose output row is `y`.
fn softmax_backward_in_place(y: &[f64], dy: &mut [f64]) {
    let inner = dot(dy, y);
    for (d, &p) in dy.iter_mut().zip(y) {
        *d = p * (*d - inner);
    }
}

pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    out
}
