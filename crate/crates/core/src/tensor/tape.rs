use rand::Rng;

use super::kernels::{matmul_nt, matmul_tn};
use super::{gelu_scalar, normal_cdf, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Reshape(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Dropout(Var, Vec<f64>),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    L1 {
        pred: Var,
        target: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records primitive operations in execution order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`]: one optional gradient per tape node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
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

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err("add", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Adds a length-`n` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(row));
        let n = ta.cols();
        if tb.len() != n || ta.shape().is_empty() {
            return Err(dim_err("add_row", ta, tb));
        }
        let b = tb.data();
        let data = ta
            .data()
            .chunks(n)
            .flat_map(|r| r.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, row]);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    /// `x * w + b` for a row-major batch `x[m x k]`, `w[k x n]`, `b[n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * factor).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, factor), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Softmax over the last axis, with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let n = ta.cols();
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Softmax(a), rg))
    }

    /// Normalizes the last axis to zero mean and unit (population) variance,
    /// then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.cols();
        if tg.len() != d || tb.len() != d || tx.shape().is_empty() {
            return Err(dim_err("layer_norm", tx, tg));
        }
        let mut xhat = Vec::with_capacity(tx.len());
        let mut inv_std = Vec::with_capacity(tx.rows());
        let mut out = Vec::with_capacity(tx.len());
        for row in tx.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * tg.data()[j] + tb.data()[j]);
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            value,
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

    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| gelu_scalar(x)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(value, Op::Gelu(a), rg)
    }

    /// Inverted dropout: kept units are scaled by `1 / (1 - p)`.
    ///
    /// `p == 0` returns `a` unchanged without touching the RNG.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout rate {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(a);
        }
        let keep_scale = 1.0 / (1.0 - p);
        let ta = self.value(a);
        let mask: Vec<f64> = (0..ta.len())
            .map(|_| {
                if rng.random::<f64>() < p {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect();
        let data = ta.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Dropout(a, mask), rg))
    }

    /// Selects rows of a matrix by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (m, n) = match tt.shape() {
            &[m, n] => (m, n),
            _ => return Err(dim_err("gather_rows", tt, tt)),
        };
        let mut data = Vec::with_capacity(ids.len() * n);
        for &i in ids {
            if i >= m {
                return Err(Error::Input(format!(
                    "row index {i} out of range for table with {m} rows"
                )));
            }
            data.extend_from_slice(tt.row(i));
        }
        let value = Tensor::new(vec![ids.len(), n], data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(value, Op::GatherRows(table, ids.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = match ta.shape() {
            &[m, n] if start + len <= n => (m, n),
            _ => return Err(dim_err("slice_cols", ta, ta)),
        };
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&ta.data()[i * n + start..i * n + start + len]);
        }
        let value = Tensor::new(vec![m, len], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SliceCols(a, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Input("concat_cols of nothing".into()))?;
        let m = self.value(*first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let t = self.value(*p);
            if t.shape().len() != 2 || t.rows() != m {
                return Err(dim_err("concat_cols", self.value(*first), t));
            }
            widths.push(t.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(i));
            }
        }
        let value = Tensor::new(vec![m, total], data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let n = tl.cols();
        if tl.shape().len() != 2 || tl.rows() != targets.len() || targets.is_empty() {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: tl.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if tl.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("cross-entropy logits contain NaN".into()));
        }
        let mut probs = tl.data().to_vec();
        let mut total = 0.0;
        for (row, &t) in probs.chunks_mut(n).zip(targets) {
            if t >= n {
                return Err(Error::Input(format!("target {t} out of range {n}")));
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
            softmax_in_place(row);
        }
        let value = Tensor::scalar(total / targets.len() as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean absolute error against constant targets.
    pub fn l1_loss(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let tp = self.value(pred);
        if tp.len() != target.len() || target.is_empty() {
            return Err(Error::Dimension {
                op: "l1_loss",
                lhs: tp.shape().to_vec(),
                rhs: vec![target.len()],
            });
        }
        let total: f64 = tp.data().iter().zip(target).map(|(p, t)| (p - t).abs()).sum();
        let value = Tensor::scalar(total / target.len() as f64);
        let rg = self.rg(&[pred]);
        Ok(self.push(
            value,
            Op::L1 {
                pred,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64);
        let rg = self.rg(&[a]);
        self.push(value, Op::Mean(a), rg)
    }

    /// Propagates `d loss / d node` back through every recorded operation.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(lt.shape().to_vec(), vec![1.0])?);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(&delta) {
                    *a += b;
                }
            }
            slot @ None => {
                let shape = self.nodes[v.0].value.shape().to_vec();
                *slot = Some(Tensor::new(shape, delta).expect("gradient shape"));
            }
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, matmul_nt(gd, tb.data(), m, n, k));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, matmul_tn(ta.data(), gd, k, m, n));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (g.shape()[0], g.shape()[1]);
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        out[j * m + i] = gd[i * n + j];
                    }
                }
                self.accumulate(grads, *a, out);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.to_vec());
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, gd.to_vec());
                if self.requires_grad(*row) {
                    let n = g.cols();
                    let mut acc = vec![0.0; n];
                    for r in gd.chunks(n) {
                        for (s, v) in acc.iter_mut().zip(r) {
                            *s += v;
                        }
                    }
                    self.accumulate(grads, *row, acc);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let da = gd.iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                let db = gd.iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Scale(a, f) => {
                self.accumulate(grads, *a, gd.iter().map(|g| g * f).collect());
            }
            Op::Reshape(a) => self.accumulate(grads, *a, gd.to_vec()),
            Op::Softmax(a) => {
                let y = node.value.data();
                let n = node.value.cols();
                let mut dx = vec![0.0; y.len()];
                for ((dxr, yr), gr) in dx.chunks_mut(n).zip(y.chunks(n)).zip(gd.chunks(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..n {
                        dxr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain).data();
                let d = gv.len();
                if self.requires_grad(*gain) {
                    let mut dg = vec![0.0; d];
                    for (gr, hr) in gd.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                    self.accumulate(grads, *gain, dg);
                }
                if self.requires_grad(*bias) {
                    let mut db = vec![0.0; d];
                    for gr in gd.chunks(d) {
                        for j in 0..d {
                            db[j] += gr[j];
                        }
                    }
                    self.accumulate(grads, *bias, db);
                }
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; gd.len()];
                    let df = d as f64;
                    for (r, ((dxr, gr), hr)) in dx
                        .chunks_mut(d)
                        .zip(gd.chunks(d))
                        .zip(xhat.chunks(d))
                        .enumerate()
                    {
                        let dh: Vec<f64> = gr.iter().zip(gv).map(|(g, w)| g * w).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dxr[j] = inv_std[r] / df * (df * dh[j] - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Gelu(a) => {
                let xs = self.value(*a).data();
                let dx = gd
                    .iter()
                    .zip(xs)
                    .map(|(g, &x)| {
                        let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
                        g * (normal_cdf(x) + x * pdf)
                    })
                    .collect();
                self.accumulate(grads, *a, dx);
            }
            Op::Dropout(a, mask) => {
                self.accumulate(grads, *a, gd.iter().zip(mask).map(|(g, m)| g * m).collect());
            }
            Op::GatherRows(table, ids) => {
                let tt = self.value(*table);
                let n = tt.cols();
                let mut dt = vec![0.0; tt.len()];
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..n {
                        dt[i * n + j] += gd[r * n + j];
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::SliceCols(a, start) => {
                let ta = self.value(*a);
                let n = ta.cols();
                let len = g.cols();
                let mut da = vec![0.0; ta.len()];
                for (i, gr) in gd.chunks(len).enumerate() {
                    da[i * n + start..i * n + start + len].copy_from_slice(gr);
                }
                self.accumulate(grads, *a, da);
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.requires_grad(*p) {
                        let mut dp = Vec::with_capacity(g.rows() * w);
                        for gr in gd.chunks(total) {
                            dp.extend_from_slice(&gr[offset..offset + w]);
                        }
                        self.accumulate(grads, *p, dp);
                    }
                    offset += w;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = self.value(*logits).cols();
                let scale = gd[0] / targets.len() as f64;
                let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dl[r * n + t] -= scale;
                }
                self.accumulate(grads, *logits, dl);
            }
            Op::L1 { pred, target } => {
                let scale = gd[0] / target.len() as f64;
                let dp = self
                    .value(*pred)
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(p, t)| scale * sign(p - t))
                    .collect();
                self.accumulate(grads, *pred, dp);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, vec![gd[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, vec![gd[0] / n as f64; n]);
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
