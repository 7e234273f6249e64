//! Reverse-mode differentiation over 2-D matrices.
//!
//! Every primitive appends a node holding its output value and whatever it
//! needs for the backward pass. `backward` walks the nodes in exact reverse
//! registration order. Nodes that no trainable leaf feeds into are skipped.

use crate::error::{Error, Result};
use crate::math::{Matrix, Scalar};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T: Scalar> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f64>,
    },
    Softmax(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Matrix<T>,
        normalizer: f64,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulBt(..) => "matmul_bt",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Gelu(..) => "gelu",
            Op::RmsNorm { .. } => "rms_norm",
            Op::Softmax(..) => "softmax",
            Op::Embedding { .. } => "embedding",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
        }
    }
}

struct Node<T: Scalar> {
    value: Matrix<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub const RMS_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T: Scalar = f32> {
    grads: Vec<Option<Matrix<T>>>,
    visited: Vec<&'static str>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Names of the operations whose backward rule ran, in visit order.
    pub fn visit_order(&self) -> &[&'static str] {
        &self.visited
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Matrix<T>>, g: Matrix<T>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        None => *slot = Some(g),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Registers an input. Only leaves with `trainable` set receive gradients.
    pub fn leaf(&mut self, value: Matrix<T>, trainable: bool) -> Var {
        self.push(value, Op::Leaf, trainable)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`; the linear-layer form with weights stored out×in.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_bt(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMulBt(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).scale(s);
        let ng = self.needs(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| {
            let x = x.as_f64();
            let u = GELU_C * (x + GELU_K * x * x * x);
            T::from_f64(0.5 * x * (1.0 + u.tanh()))
        });
        let ng = self.needs(a);
        self.push(value, Op::Gelu(a), ng)
    }

    /// Row-wise RMS normalization scaled by a `1 x cols` gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let xv = self.value(x);
        let gv = self.value(gain);
        if gv.rows() != 1 || gv.cols() != xv.cols() {
            return Err(Error::Shape(format!(
                "rms_norm gain {}x{} for input {}x{}",
                gv.rows(),
                gv.cols(),
                xv.rows(),
                xv.cols()
            )));
        }
        let n = xv.cols() as f64;
        let mut out = Matrix::zeros(xv.rows(), xv.cols());
        let mut inv_rms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let ms = row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>() / n;
            let inv = 1.0 / (ms + RMS_EPS).sqrt();
            inv_rms.push(inv);
            for ((o, &v), &g) in out.row_mut(r).iter_mut().zip(row).zip(gv.data()) {
                *o = T::from_f64(v.as_f64() * inv * g.as_f64());
            }
        }
        let ng = self.needs(x) || self.needs(gain);
        Ok(self.push(out, Op::RmsNorm { x, gain, inv_rms }, ng))
    }

    /// Row-wise softmax. With `causal`, entries above the diagonal are
    /// excluded and come out as exactly zero (square inputs only).
    pub fn softmax(&mut self, x: Var, causal: bool) -> Result<Var> {
        let xv = self.value(x);
        if causal && xv.rows() != xv.cols() {
            return Err(Error::Shape(format!(
                "causal softmax needs a square input, got {}x{}",
                xv.rows(),
                xv.cols()
            )));
        }
        let mut out = Matrix::zeros(xv.rows(), xv.cols());
        for r in 0..xv.rows() {
            let width = if causal { r + 1 } else { xv.cols() };
            let row = &xv.row(r)[..width];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
            let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            for (o, e) in out.row_mut(r).iter_mut().zip(exps) {
                *o = T::from_f64(e / total);
            }
        }
        let ng = self.needs(x);
        Ok(self.push(out, Op::Softmax(x), ng))
    }

    /// Gathers rows of `table`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let mut out = Matrix::zeros(ids.len(), tv.cols());
        for (r, &id) in ids.iter().enumerate() {
            if id >= tv.rows() {
                return Err(Error::Input(format!(
                    "index {id} out of range for a table of {} rows",
                    tv.rows()
                )));
            }
            out.row_mut(r).copy_from_slice(tv.row(id));
        }
        let ng = self.needs(table);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Summed negative log-likelihood over the rows with a target, divided by
    /// `normalizer`. Produces a 1x1 node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>], normalizer: f64) -> Result<Var> {
        let lv = self.value(logits);
        if targets.len() != lv.rows() {
            return Err(Error::Shape(format!(
                "{} targets for {} logit rows",
                targets.len(),
                lv.rows()
            )));
        }
        if normalizer <= 0.0 {
            return Err(Error::Input("cross-entropy normalizer must be positive".into()));
        }
        let mut probs = Matrix::zeros(lv.rows(), lv.cols());
        let mut nll = 0.0f64;
        for (r, target) in targets.iter().enumerate() {
            let Some(t) = *target else { continue };
            if t >= lv.cols() {
                return Err(Error::Input(format!(
                    "target {t} out of range for {} classes",
                    lv.cols()
                )));
            }
            let row = lv.row(r);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
            let total: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
            let log_z = max + total.ln();
            for (p, v) in probs.row_mut(r).iter_mut().zip(row) {
                *p = T::from_f64((v.as_f64() - log_z).exp());
            }
            nll += log_z - row[t].as_f64();
        }
        let loss = Matrix::filled(1, 1, T::from_f64(nll / normalizer));
        let ng = self.needs(logits);
        Ok(self.push(
            loss,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                normalizer,
            },
            ng,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + width > xv.cols() {
            return Err(Error::Shape(format!(
                "column slice {start}..{} of a {}-column matrix",
                start + width,
                xv.cols()
            )));
        }
        let mut out = Matrix::zeros(xv.rows(), width);
        for r in 0..xv.rows() {
            out.row_mut(r).copy_from_slice(&xv.row(r)[start..start + width]);
        }
        let ng = self.needs(x);
        Ok(self.push(out, Op::SliceCols { x, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| Error::Input("concat of zero parts".into()))?;
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::Shape("concat_cols parts differ in row count".into()));
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Backpropagates from a 1x1 node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::Shape(format!(
                "backward needs a 1x1 loss, got {}x{}",
                lv.rows(),
                lv.cols()
            )));
        }
        if !lv.data()[0].is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {}", lv.data()[0])));
        }
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut visited = Vec::new();
        grads[loss.0] = Some(Matrix::filled(1, 1, T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            visited.push(node.op.name());
            self.backprop_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, visited })
    }

    fn backprop_node(&self, node: &Node<T>, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g.matmul_bt(self.value(*b))?);
                }
                if self.needs(*b) {
                    accumulate(&mut grads[b.0], self.value(*a).matmul_at(g)?);
                }
            }
            Op::MatMulBt(a, b) => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g.matmul(self.value(*b))?);
                }
                if self.needs(*b) {
                    accumulate(&mut grads[b.0], g.matmul_at(self.value(*a))?);
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.needs(*b) {
                    accumulate(&mut grads[b.0], g.clone());
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g.hadamard(self.value(*b))?);
                }
                if self.needs(*b) {
                    accumulate(&mut grads[b.0], g.hadamard(self.value(*a))?);
                }
            }
            Op::Scale(a, s) => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g.scale(*s));
                }
            }
            Op::Gelu(a) => {
                if self.needs(*a) {
                    let x = self.value(*a);
                    let mut dx = Matrix::zeros(x.rows(), x.cols());
                    for ((d, &xv), &gv) in dx.data_mut().iter_mut().zip(x.data()).zip(g.data()) {
                        let x = xv.as_f64();
                        let u = GELU_C * (x + GELU_K * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                        let deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                        *d = T::from_f64(gv.as_f64() * deriv);
                    }
                    accumulate(&mut grads[a.0], dx);
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let n = xv.cols() as f64;
                if self.needs(*gain) {
                    let mut dg = vec![0.0f64; xv.cols()];
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        for ((d, &xj), &gj) in dg.iter_mut().zip(xv.row(r)).zip(g.row(r)) {
                            *d += gj.as_f64() * xj.as_f64() * inv;
                        }
                    }
                    let dg = Matrix::from_vec(1, xv.cols(), dg.into_iter().map(T::from_f64).collect())?;
                    accumulate(&mut grads[gain.0], dg);
                }
                if self.needs(*x) {
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let xr = xv.row(r);
                        let gr = g.row(r);
                        let proj: f64 = xr
                            .iter()
                            .zip(gr)
                            .zip(gv.data())
                            .map(|((&xj, &dj), &wj)| xj.as_f64() * dj.as_f64() * wj.as_f64())
                            .sum();
                        let coef = inv * inv * inv * proj / n;
                        for (((d, &xj), &dj), &wj) in dx.row_mut(r).iter_mut().zip(xr).zip(gr).zip(gv.data()) {
                            *d = T::from_f64(inv * wj.as_f64() * dj.as_f64() - coef * xj.as_f64());
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
            }
            Op::Softmax(x) => {
                if self.needs(*x) {
                    let y = &node.value;
                    let mut dx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                        for ((d, &yv), &gv) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *d = T::from_f64(yv.as_f64() * (gv.as_f64() - inner));
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
            }
            Op::Embedding { table, ids } => {
                if self.needs(*table) {
                    let tv = self.value(*table);
                    let mut dt = Matrix::zeros(tv.rows(), tv.cols());
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, &gv) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *d += gv;
                        }
                    }
                    accumulate(&mut grads[table.0], dt);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                normalizer,
            } => {
                if self.needs(*logits) {
                    let upstream = g.data()[0].as_f64() / normalizer;
                    let mut dl = Matrix::zeros(probs.rows(), probs.cols());
                    for (r, target) in targets.iter().enumerate() {
                        let Some(t) = *target else { continue };
                        for (c, (d, &p)) in dl.row_mut(r).iter_mut().zip(probs.row(r)).enumerate() {
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            *d = T::from_f64((p.as_f64() - onehot) * upstream);
                        }
                    }
                    accumulate(&mut grads[logits.0], dl);
                }
            }
            Op::SliceCols { x, start } => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for r in 0..xv.rows() {
                        dx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads[x.0], dx);
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.needs(p) {
                        let mut dp = Matrix::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        accumulate(&mut grads[p.0], dp);
                    }
                    off += w;
                }
            }
        }
        Ok(())
    }
}
