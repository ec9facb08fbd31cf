use std::ops::Range;

use super::{RngState, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    /// `a[.., j] + bias[j]`: the one supported broadcast.
    AddBias(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    /// Adds a constant offset; the gradient passes through unchanged.
    Shift(Var),
    Concat(Vec<Var>),
    SliceCols(Var, Range<usize>),
    OuterRows(Var, Var),
    Sum(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Mse(Var, Var),
    L2Sq(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of executed primitives, in execution (hence topological) order.
///
/// A graph and the tensors on it belong to one thread; build a fresh graph
/// per forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// Leaf that receives gradients on [`Graph::backward`].
    pub fn param(&mut self, mut t: Tensor) -> Var {
        t.zero_grad();
        self.push(t, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.zero_grad();
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a [`Graph::param`] leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn vals(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.values()
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            [c] => Ok((1, c)),
            ref s => Err(shape_err(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(shape_err(format!(
                "matmul of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let (av, bv) = (self.vals(a), self.vals(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                orow.iter_mut().zip(brow).for_each(|(o, y)| *o += x * y);
            }
        }
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn zip_same(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!(
                "elementwise op on {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<f64> = self
            .vals(a)
            .iter()
            .zip(self.vals(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, op, rg))
    }

    /// Elementwise sum. A 1-D `b` whose length equals the last dimension of
    /// `a` is broadcast across rows (bias addition); no other broadcast exists.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) == self.shape(b) {
            return self.zip_same(a, b, |x, y| x + y, Op::Add(a, b));
        }
        let bshape = self.shape(b);
        if bshape.len() == 1 && bshape[0] == self.value(a).cols() {
            let c = bshape[0];
            let bias = self.vals(b);
            let out: Vec<f64> = self
                .vals(a)
                .iter()
                .enumerate()
                .map(|(i, x)| x + bias[i % c])
                .collect();
            let shape = self.shape(a).to_vec();
            let rg = self.needs(&[a, b]);
            return Ok(self.push(Tensor::new(shape, out)?, Op::AddBias(a, b), rg));
        }
        Err(shape_err(format!(
            "add of {:?} and {:?}",
            self.shape(a),
            self.shape(b)
        )))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = &self.nodes[a.0].value;
        let out = Tensor::new(
            t.shape().to_vec(),
            t.values().iter().map(|x| f(*x)).collect(),
        )
        .expect("same shape");
        let rg = self.needs(&[a]);
        self.push(out, op, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    /// `a + offset` with `offset` a constant of the same shape.
    pub fn shift(&mut self, a: Var, offset: &[f64]) -> Result<Var> {
        if offset.len() != self.value(a).len() {
            return Err(shape_err(format!(
                "offset of length {} for shape {:?}",
                offset.len(),
                self.shape(a)
            )));
        }
        let out: Vec<f64> = self
            .vals(a)
            .iter()
            .zip(offset)
            .map(|(x, e)| x + e)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Shift(a), rg))
    }

    /// Entropy-regularization noise: `x + alpha * eps`, `eps ~ N(0, I)`.
    ///
    /// Outside training, or with `alpha == 0`, returns `x` itself (no node,
    /// no draws). `eps` is a constant for the backward pass.
    pub fn gaussian_noise(
        &mut self,
        x: Var,
        alpha: f64,
        rng: &mut RngState,
        training: bool,
    ) -> Result<Var> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::Param(format!(
                "noise weight must be finite and >= 0, got {alpha}"
            )));
        }
        if !training || alpha == 0.0 {
            return Ok(x);
        }
        let noise: Vec<f64> = (0..self.value(x).len())
            .map(|_| alpha * rng.normal())
            .collect();
        self.shift(x, &noise)
    }

    /// Column-wise concatenation of `batch × d_i` parts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| shape_err("concat of zero parts"))?;
        let (rows, _) = self.dims2(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if r != rows {
                return Err(shape_err(format!(
                    "concat parts disagree on batch: {:?} vs {:?}",
                    self.shape(first),
                    self.shape(p)
                )));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.vals(p)[r * w..(r + 1) * w]);
            }
        }
        let rg = self.needs(parts);
        Ok(self.push(
            Tensor::new(vec![rows, total], out)?,
            Op::Concat(parts.to_vec()),
            rg,
        ))
    }

    /// Columns `cols` of a `batch × d` matrix.
    pub fn slice(&mut self, a: Var, cols: Range<usize>) -> Result<Var> {
        let (rows, width) = self.dims2(a)?;
        if cols.start >= cols.end || cols.end > width {
            return Err(Error::Bounds(format!("slice {cols:?} of width {width}")));
        }
        let w = cols.len();
        let src = self.vals(a);
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&src[r * width + cols.start..r * width + cols.end]);
        }
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::new(vec![rows, w], out)?, Op::SliceCols(a, cols), rg))
    }

    /// Per-row outer product: `out[r, i * n + j] = a[r, i] * b[r, j]`.
    pub fn outer_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, m) = self.dims2(a)?;
        let (rb, n) = self.dims2(b)?;
        if ra != rb {
            return Err(shape_err(format!(
                "outer_rows of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let (av, bv) = (self.vals(a), self.vals(b));
        let mut out = Vec::with_capacity(ra * m * n);
        for r in 0..ra {
            for i in 0..m {
                for j in 0..n {
                    out.push(av[r * m + i] * bv[r * n + j]);
                }
            }
        }
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(vec![ra, m * n], out)?, Op::OuterRows(a, b), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.vals(a).iter().sum();
        let rg = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, c) = self.dims2(logits)?;
        if targets.len() != rows {
            return Err(shape_err(format!(
                "{} targets for {rows} rows",
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Bounds(format!("target index {t} with {c} classes")));
        }
        let lv = self.vals(logits);
        let mut probs = vec![0.0; rows * c];
        let mut loss = 0.0;
        for r in 0..rows {
            let row = &lv[r * c..(r + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let log_z = max + z.ln();
            loss += log_z - row[targets[r]];
            for j in 0..c {
                probs[r * c + j] = (row[j] - log_z).exp();
            }
        }
        let rg = self.needs(&[logits]);
        let op = Op::SoftmaxCrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss / rows as f64), op, rg))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(shape_err(format!(
                "mse of {:?} and {:?}",
                self.shape(pred),
                self.shape(target)
            )));
        }
        let n = self.value(pred).len() as f64;
        let s: f64 = self
            .vals(pred)
            .iter()
            .zip(self.vals(target))
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        let rg = self.needs(&[pred, target]);
        Ok(self.push(Tensor::scalar(s / n), Op::Mse(pred, target), rg))
    }

    /// Mean over rows of the squared Euclidean norm of each row.
    pub fn l2_sq(&mut self, x: Var) -> Var {
        let rows = self.value(x).rows() as f64;
        let s: f64 = self.vals(x).iter().map(|v| v * v).sum();
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(s / rows), Op::L2Sq(x), rg)
    }

    /// Accumulates `d loss / d leaf` into every [`Graph::param`] leaf that
    /// `loss` depends on. Gradients add up across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &gout, &mut grads)?;
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        if matches!(self.nodes[i].op, Op::Leaf) {
            return self.nodes[i].value.accumulate_grad(gout);
        }
        let nodes = &self.nodes;
        let mut send = |v: Var, delta: Vec<f64>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(g) => g.iter_mut().zip(&delta).for_each(|(g, d)| *g += d),
                slot @ None => *slot = Some(delta),
            }
        };
        let out = nodes[i].value.values();
        match &nodes[i].op {
            Op::Leaf => unreachable!("leaves handled above"),
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a)?;
                let (_, n) = self.dims2(*b)?;
                let (av, bv) = (self.vals(*a), self.vals(*b));
                if nodes[a.0].requires_grad {
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            da[r * k + p] = gout[r * n..(r + 1) * n]
                                .iter()
                                .zip(brow)
                                .map(|(g, y)| g * y)
                                .sum();
                        }
                    }
                    send(*a, da);
                }
                if nodes[b.0].requires_grad {
                    let mut db = vec![0.0; k * n];
                    for r in 0..m {
                        let grow = &gout[r * n..(r + 1) * n];
                        for p in 0..k {
                            let x = av[r * k + p];
                            db[p * n..(p + 1) * n]
                                .iter_mut()
                                .zip(grow)
                                .for_each(|(d, g)| *d += x * g);
                        }
                    }
                    send(*b, db);
                }
            }
            Op::Add(a, b) => {
                send(*a, gout.to_vec());
                send(*b, gout.to_vec());
            }
            Op::AddBias(a, b) => {
                send(*a, gout.to_vec());
                let c = self.value(*b).len();
                let mut db = vec![0.0; c];
                gout.iter().enumerate().for_each(|(j, g)| db[j % c] += g);
                send(*b, db);
            }
            Op::Sub(a, b) => {
                send(*a, gout.to_vec());
                send(*b, gout.iter().map(|g| -g).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.vals(*a), self.vals(*b));
                let da = gout.iter().zip(bv).map(|(g, y)| g * y).collect();
                let db = gout.iter().zip(av).map(|(g, x)| g * x).collect();
                send(*a, da);
                send(*b, db);
            }
            Op::Scale(a, c) => send(*a, gout.iter().map(|g| c * g).collect()),
            Op::Tanh(a) => send(
                *a,
                gout.iter()
                    .zip(out)
                    .map(|(g, y)| g * (1.0 - y * y))
                    .collect(),
            ),
            Op::Relu(a) => {
                let d = gout
                    .iter()
                    .zip(self.vals(*a))
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                send(*a, d);
            }
            Op::Sigmoid(a) => send(
                *a,
                gout.iter()
                    .zip(out)
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect(),
            ),
            Op::Shift(a) => send(*a, gout.to_vec()),
            Op::Concat(parts) => {
                let rows = self.value(parts[0]).rows();
                let total = out.len() / rows;
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut d = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        d.extend_from_slice(&gout[r * total + offset..r * total + offset + w]);
                    }
                    send(p, d);
                    offset += w;
                }
            }
            Op::SliceCols(a, cols) => {
                let width = self.value(*a).cols();
                let rows = self.value(*a).rows();
                let w = cols.len();
                let mut d = vec![0.0; rows * width];
                for r in 0..rows {
                    d[r * width + cols.start..r * width + cols.end]
                        .copy_from_slice(&gout[r * w..(r + 1) * w]);
                }
                send(*a, d);
            }
            Op::OuterRows(a, b) => {
                let (rows, m) = self.dims2(*a)?;
                let (_, n) = self.dims2(*b)?;
                let (av, bv) = (self.vals(*a), self.vals(*b));
                let mut da = vec![0.0; rows * m];
                let mut db = vec![0.0; rows * n];
                for r in 0..rows {
                    for p in 0..m {
                        for q in 0..n {
                            let g = gout[r * m * n + p * n + q];
                            da[r * m + p] += g * bv[r * n + q];
                            db[r * n + q] += g * av[r * m + p];
                        }
                    }
                }
                send(*a, da);
                send(*b, db);
            }
            Op::Sum(a) => send(*a, vec![gout[0]; self.value(*a).len()]),
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = self.value(*logits).cols();
                let rows = targets.len() as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| gout[0] * p / rows).collect();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * c + t] -= gout[0] / rows;
                }
                send(*logits, d);
            }
            Op::Mse(p, t) => {
                let n = self.value(*p).len() as f64;
                let d: Vec<f64> = self
                    .vals(*p)
                    .iter()
                    .zip(self.vals(*t))
                    .map(|(x, y)| gout[0] * 2.0 * (x - y) / n)
                    .collect();
                send(*t, d.iter().map(|g| -g).collect());
                send(*p, d);
            }
            Op::L2Sq(x) => {
                let rows = self.value(*x).rows() as f64;
                send(
                    *x,
                    self.vals(*x)
                        .iter()
                        .map(|v| gout[0] * 2.0 * v / rows)
                        .collect(),
                );
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
