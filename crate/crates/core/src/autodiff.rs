//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation in execution order, so the node list
//! is already topologically sorted; [`Graph::backward`] walks it once in
//! reverse. Parameters live outside the graph as [`Tensor`]s: they are
//! copied in as leaves with [`Graph::param`], and their gradients are
//! accumulated back with [`Gradients::accumulate_into`] before an
//! optimizer step.

use std::io::{Read, Write};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
            grad: None,
            requires_grad: false,
        }
    }

    /// Row-major matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R], cols: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn is_trainable(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    GradReverse {
        x: Var,
        lambda: f64,
    },
    Add(Var, Var),
    Scale(Var, f64),
    Mean(Var),
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    WeightedBce {
        logits: Var,
        targets: Vec<f64>,
        pos_weight: f64,
    },
    MulticlassCe {
        logits: Var,
        classes: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    needs_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, needs_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Copies a tensor in as a leaf; gradients flow to it iff the tensor is
    /// marked trainable.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), t.requires_grad, Op::Leaf)
    }

    /// Leaf that always receives gradients.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), true, Op::Leaf)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    /// `x W + b` for `x: [n, a]`, `W: [a, b]`, `b: [b]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[0] || ws[1] != bs[0] {
            return Err(Error::Shape(format!(
                "linear: x {xs:?} · W {ws:?} + b {bs:?}"
            )));
        }
        let (n, a, m) = (xs[0], xs[1], ws[1]);
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            out.extend_from_slice(bv);
            let row = &mut out[i * m..(i + 1) * m];
            for k in 0..a {
                let xik = xv[i * a + k];
                if xik == 0.0 {
                    continue;
                }
                let wrow = &wv[k * m..(k + 1) * m];
                for (o, wk) in row.iter_mut().zip(wrow) {
                    *o += xik * wk;
                }
            }
        }
        let needs = self.node(x).needs_grad || self.node(w).needs_grad || self.node(b).needs_grad;
        Ok(self.push(vec![n, m], out, needs, Op::Linear { x, w, b }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.max(0.0)).collect();
        let n = self.node(x);
        let (shape, needs) = (n.shape.clone(), n.needs_grad);
        self.push(shape, out, needs, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        let n = self.node(x);
        let (shape, needs) = (n.shape.clone(), n.needs_grad);
        self.push(shape, out, needs, Op::Sigmoid(x))
    }

    /// Identity forward; the backward pass hands `-lambda` times the incoming
    /// gradient to `x`.
    pub fn grad_reverse(&mut self, x: Var, lambda: f64) -> Var {
        let n = self.node(x);
        let (shape, value, needs) = (n.shape.clone(), n.value.clone(), n.needs_grad);
        self.push(shape, value, needs, Op::GradReverse { x, lambda })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.node(a).needs_grad || self.node(b).needs_grad;
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, needs, Op::Add(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * c).collect();
        let n = self.node(x);
        let (shape, needs) = (n.shape.clone(), n.needs_grad);
        self.push(shape, out, needs, Op::Scale(x, c))
    }

    /// Mean of every element, as a scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.iter().sum::<f64>() / v.len().max(1) as f64;
        let needs = self.node(x).needs_grad;
        self.push(vec![], vec![m], needs, Op::Mean(x))
    }

    /// Selects rows of a matrix (or elements of a vector).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (n, width) = match shape.as_slice() {
            [n] => (*n, 1),
            [n, c] => (*n, *c),
            s => return Err(Error::Shape(format!("gather_rows on shape {s:?}"))),
        };
        if let Some(bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Index(format!("row {bad} of {n}")));
        }
        let v = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            out.extend_from_slice(&v[r * width..(r + 1) * width]);
        }
        let mut new_shape = shape;
        new_shape[0] = rows.len();
        let needs = self.node(x).needs_grad;
        Ok(self.push(
            new_shape,
            out,
            needs,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Mean of `-[w·t·log σ(s) + (1-t)·log(1-σ(s))]` over the logits, with
    /// targets `t` in `[0, 1]`. Accepts `[n]` or `[n, 1]` logits.
    pub fn weighted_bce(&mut self, logits: Var, targets: &[f64], pos_weight: f64) -> Result<Var> {
        let n = self.value(logits).len();
        let shape = self.shape(logits);
        let column = shape.len() == 1 || (shape.len() == 2 && shape[1] == 1);
        if !column || targets.len() != n {
            return Err(Error::Shape(format!(
                "weighted_bce: logits {shape:?} vs {} targets",
                targets.len()
            )));
        }
        if !(pos_weight > 0.0 && pos_weight.is_finite()) {
            return Err(Error::Training(format!(
                "pos_weight must be > 0, got {pos_weight}"
            )));
        }
        let total: f64 = self
            .value(logits)
            .iter()
            .zip(targets)
            .map(|(&s, &t)| pos_weight * t * softplus(-s) + (1.0 - t) * softplus(s))
            .sum();
        let needs = self.node(logits).needs_grad;
        Ok(self.push(
            vec![],
            vec![total / n.max(1) as f64],
            needs,
            Op::WeightedBce {
                logits,
                targets: targets.to_vec(),
                pos_weight,
            },
        ))
    }

    /// Mean of `-log softmax(logits)[class]` over rows of `[n, K]` logits.
    pub fn multiclass_ce(&mut self, logits: Var, classes: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let [n, k] = shape.as_slice() else {
            return Err(Error::Shape(format!("multiclass_ce: logits {shape:?}")));
        };
        let (n, k) = (*n, *k);
        if classes.len() != n {
            return Err(Error::Shape(format!(
                "multiclass_ce: {n} rows vs {} classes",
                classes.len()
            )));
        }
        if let Some(bad) = classes.iter().find(|&&c| c >= k) {
            return Err(Error::Index(format!("class {bad} with K = {k}")));
        }
        let v = self.value(logits);
        let mut total = 0.0;
        for (i, &c) in classes.iter().enumerate() {
            let row = &v[i * k..(i + 1) * k];
            total += log_sum_exp(row) - row[c];
        }
        let needs = self.node(logits).needs_grad;
        Ok(self.push(
            vec![],
            vec![total / n.max(1) as f64],
            needs,
            Op::MulticlassCe {
                logits,
                classes: classes.to_vec(),
            },
        ))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.node(output).value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let needs = self.nodes.iter().map(|n| n.needs_grad).collect();
        Ok(Gradients { grads, needs })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut send = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => {
                    for (a, c) in acc.iter_mut().zip(contrib) {
                        *a += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (n, a, m) = (xs[0], xs[1], node.shape[1]);
                let xv = self.value(*x);
                let wv = self.value(*w);
                if self.nodes[x.0].needs_grad {
                    let mut dx = vec![0.0; n * a];
                    for i in 0..n {
                        let gi = &g[i * m..(i + 1) * m];
                        for k in 0..a {
                            let wrow = &wv[k * m..(k + 1) * m];
                            dx[i * a + k] = gi.iter().zip(wrow).map(|(p, q)| p * q).sum();
                        }
                    }
                    send(*x, dx);
                }
                if self.nodes[w.0].needs_grad {
                    let mut dw = vec![0.0; a * m];
                    for i in 0..n {
                        let gi = &g[i * m..(i + 1) * m];
                        for k in 0..a {
                            let xik = xv[i * a + k];
                            if xik == 0.0 {
                                continue;
                            }
                            for (d, gj) in dw[k * m..(k + 1) * m].iter_mut().zip(gi) {
                                *d += xik * gj;
                            }
                        }
                    }
                    send(*w, dw);
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![0.0; m];
                    for i in 0..n {
                        for (d, gj) in db.iter_mut().zip(&g[i * m..(i + 1) * m]) {
                            *d += gj;
                        }
                    }
                    send(*b, db);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let d = xv
                    .iter()
                    .zip(g)
                    .map(|(&v, &gi)| if v > 0.0 { gi } else { 0.0 })
                    .collect();
                send(*x, d);
            }
            Op::Sigmoid(x) => {
                let d = node
                    .value
                    .iter()
                    .zip(g)
                    .map(|(&s, &gi)| gi * s * (1.0 - s))
                    .collect();
                send(*x, d);
            }
            Op::GradReverse { x, lambda } => {
                send(*x, g.iter().map(|gi| -lambda * gi).collect());
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Scale(x, c) => send(*x, g.iter().map(|gi| gi * c).collect()),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                send(*x, vec![g[0] / n.max(1) as f64; n]);
            }
            Op::GatherRows { x, rows } => {
                let src = self.shape(*x);
                let width = if src.len() == 2 { src[1] } else { 1 };
                let mut d = vec![0.0; self.value(*x).len()];
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..width {
                        d[r * width + j] += g[i * width + j];
                    }
                }
                send(*x, d);
            }
            Op::WeightedBce {
                logits,
                targets,
                pos_weight,
            } => {
                let s = self.value(*logits);
                let scale = g[0] / s.len().max(1) as f64;
                let d = s
                    .iter()
                    .zip(targets)
                    .map(|(&si, &t)| {
                        let p = sigmoid(si);
                        scale * (pos_weight * t * (p - 1.0) + (1.0 - t) * p)
                    })
                    .collect();
                send(*logits, d);
            }
            Op::MulticlassCe { logits, classes } => {
                let k = self.shape(*logits)[1];
                let v = self.value(*logits);
                let scale = g[0] / classes.len().max(1) as f64;
                let mut d = vec![0.0; v.len()];
                for (i, &c) in classes.iter().enumerate() {
                    let row = &v[i * k..(i + 1) * k];
                    let lse = log_sum_exp(row);
                    for j in 0..k {
                        let p = (row[j] - lse).exp();
                        d[i * k + j] = scale * (p - if j == c { 1.0 } else { 0.0 });
                    }
                }
                send(*logits, d);
            }
        }
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    needs: Vec<bool>,
}

impl Gradients {
    /// Gradient of the output with respect to `v`, if it was reached.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        if !self.needs[v.0] {
            return None;
        }
        self.grads[v.0].as_deref()
    }

    /// Adds the gradient of `v` into `t.grad`. Unreached vars contribute
    /// zeros so the tensor still counts as having a gradient.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) {
        let g = t.grad.get_or_insert_with(|| vec![0.0; t.data.len()]);
        if let Some(src) = self.get(v) {
            for (a, b) in g.iter_mut().zip(src) {
                *a += b;
            }
        }
    }
}

/// `p <- p - lr * (grad + weight_decay * p)` on every trainable tensor, then
/// clears the gradients. Fails without touching anything if a trainable
/// tensor has no gradient.
pub fn sgd_step<'a, I>(params: I, lr: f64, weight_decay: f64) -> Result<()>
where
    I: IntoIterator<Item = &'a mut Tensor>,
{
    let mut params: Vec<&mut Tensor> = params.into_iter().filter(|t| t.requires_grad).collect();
    if let Some(i) = params.iter().position(|t| t.grad.is_none()) {
        return Err(Error::State(format!("parameter {i} has no gradient")));
    }
    for t in params.iter_mut() {
        let g = t.grad.take().expect("checked above");
        for (p, gi) in t.data.iter_mut().zip(g) {
            *p -= lr * (gi + weight_decay * *p);
        }
    }
    Ok(())
}

/// Rescales the accumulated gradients so their joint L2 norm is at most
/// `max_norm`; returns the norm before clipping. Tensors without a gradient
/// are skipped.
pub fn clip_grad_norm<'a, I>(params: I, max_norm: f64) -> f64
where
    I: IntoIterator<Item = &'a mut Tensor>,
{
    let mut grads: Vec<&mut Vec<f64>> =
        params.into_iter().filter_map(|t| t.grad.as_mut()).collect();
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let c = max_norm / norm;
        grads
            .iter_mut()
            .for_each(|g| g.iter_mut().for_each(|v| *v *= c));
    }
    norm
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"LMCK";
const CHECKPOINT_VERSION: u8 = 1;

/// Writes named tensors as
/// `magic "LMCK" | version u8 | count u32 | { name_len u32, name utf8,
/// ndim u32, dims u64 x ndim, values f64 x prod(dims) }*`, little-endian.
pub fn write_checkpoint<W: Write>(mut w: W, entries: &[(String, &Tensor)]) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&[CHECKPOINT_VERSION])?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for d in &t.shape {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        for v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    fn take<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        r.read_exact(&mut buf)
            .map_err(|e| Error::Checkpoint(format!("truncated: {e}")))?;
        Ok(buf)
    }
    if &take::<4, _>(&mut r)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = take::<1, _>(&mut r)?[0];
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(take(&mut r)?);
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = u32::from_le_bytes(take(&mut r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Checkpoint(format!("truncated name: {e}")))?;
        let name =
            String::from_utf8(name).map_err(|_| Error::Checkpoint("name is not utf-8".into()))?;
        let ndim = u32::from_le_bytes(take(&mut r)?) as usize;
        let shape = (0..ndim)
            .map(|_| take::<8, _>(&mut r).map(|b| u64::from_le_bytes(b) as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| take::<8, _>(&mut r).map(f64::from_le_bytes))
            .collect::<Result<Vec<_>>>()?;
        out.push((name, Tensor::new(shape, data)?.requires_grad(true)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central differences of a scalar function of one tensor.
    fn numeric_grad(t: &Tensor, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
        let h = 1e-5;
        (0..t.len())
            .map(|i| {
                let mut p = t.clone();
                p.data_mut()[i] += h;
                let mut m = t.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(a: &[f64], b: &[f64], rel: f64) {
        for (x, y) in a.iter().zip(b) {
            let scale = x.abs().max(y.abs()).max(1e-3);
            assert!((x - y).abs() / scale < rel, "{x} vs {y}");
        }
    }

    #[test]
    fn linear_examples() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::from_rows(&[[1.0, 2.0]], 2).unwrap());
        let w = g.constant(&Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]], 2).unwrap());
        let b = g.constant(&Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y), &[1.0, 2.0]);

        let w0 = g.constant(&Tensor::zeros(vec![2, 2]));
        let b34 = g.constant(&Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let y = g.linear(x, w0, b34).unwrap();
        assert_eq!(g.value(y), &[3.0, 4.0]);

        let bad = g.constant(&Tensor::zeros(vec![3, 2]));
        let err = g.linear(x, bad, b).unwrap_err();
        assert!(err.to_string().contains("[1, 2]") && err.to_string().contains("[3, 2]"));
    }

    #[test]
    fn linear_weight_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, vec![3, 4]);
        let w = rand_tensor(&mut rng, vec![4, 2]);
        let b = rand_tensor(&mut rng, vec![2]);
        let f = |w: &Tensor| {
            let mut g = Graph::new();
            let (xv, wv, bv) = (g.constant(&x), g.param(w), g.constant(&b));
            let y = g.linear(xv, wv, bv).unwrap();
            g.value(y).iter().sum::<f64>()
        };
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(&x), g.param(&w), g.constant(&b));
        let y = g.linear(xv, wv, bv).unwrap();
        let s = g.mean(y);
        let s = g.scale(s, 6.0); // sum of 6 outputs
        let grads = g.backward(s).unwrap();
        let analytic = grads.get(wv).unwrap();
        // d sum / dW = x^T 1
        for k in 0..4 {
            let col: f64 = (0..3).map(|i| x.data()[i * 4 + k]).sum();
            for j in 0..2 {
                assert!((analytic[k * 2 + j] - col).abs() < 1e-12);
            }
        }
        assert_close(analytic, &numeric_grad(&w, f), 1e-6);
    }

    #[test]
    fn bce_examples() {
        let mut g = Graph::new();
        let s = g.constant(&Tensor::new(vec![1], vec![0.0]).unwrap());
        let l = g.weighted_bce(s, &[1.0], 1.0).unwrap();
        assert!((g.scalar(l) - 2f64.ln()).abs() < 1e-12);
        let l = g.weighted_bce(s, &[1.0], 2.0).unwrap();
        assert!((g.scalar(l) - 2.0 * 2f64.ln()).abs() < 1e-12);
        let big = g.constant(&Tensor::new(vec![1], vec![50.0]).unwrap());
        let l = g.weighted_bce(big, &[1.0], 1.0).unwrap();
        assert!(g.scalar(l) < 1e-20 && g.scalar(l) >= 0.0);
        let l = g.weighted_bce(big, &[0.0], 1.0).unwrap();
        assert!((g.scalar(l) - 50.0).abs() < 1e-12);
        assert!(g.weighted_bce(s, &[1.0], 0.0).is_err());
    }

    #[test]
    fn bce_unit_weight_equals_plain_bce() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = rand_tensor(&mut rng, vec![16]);
        let y: Vec<f64> = (0..16).map(|i| (i % 3 == 0) as u8 as f64).collect();
        let mut g = Graph::new();
        let v = g.constant(&s);
        let l = g.weighted_bce(v, &y, 1.0).unwrap();
        let plain: f64 = s
            .data()
            .iter()
            .zip(&y)
            .map(|(&si, &yi)| {
                let p = 1.0 / (1.0 + (-si).exp());
                -(yi * p.ln() + (1.0 - yi) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 16.0;
        assert!((g.scalar(l) - plain).abs() < 1e-12);
    }

    #[test]
    fn duplicated_negatives_match_half_positive_weight() {
        // Each negative counted twice at weight 1 is the same objective, up to
        // the normalising count, as weight 1/2 on positives.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = rand_tensor(&mut rng, vec![12]);
        let y: Vec<f64> = (0..12).map(|i| (i % 4 != 0) as u8 as f64).collect();
        let (mut ds, mut dy) = (s.data().to_vec(), y.clone());
        for i in 0..12 {
            if y[i] == 0.0 {
                ds.push(s.data()[i]);
                dy.push(0.0);
            }
        }
        let mut g = Graph::new();
        let a = g.constant(&Tensor::new(vec![ds.len()], ds.clone()).unwrap());
        let dup = g.weighted_bce(a, &dy, 1.0).unwrap();
        let b = g.constant(&s);
        let half = g.weighted_bce(b, &y, 0.5).unwrap();
        let lhs = g.scalar(dup) * ds.len() as f64;
        let rhs = g.scalar(half) * 12.0 * 2.0;
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }

    #[test]
    fn multiclass_examples() {
        let mut g = Graph::new();
        let eq = g.constant(&Tensor::zeros(vec![2, 3]));
        let l = g.multiclass_ce(eq, &[0, 2]).unwrap();
        assert!((g.scalar(l) - 3f64.ln()).abs() < 1e-12);
        let hot = g.constant(&Tensor::from_rows(&[[0.0, 50.0, 0.0]], 3).unwrap());
        let l = g.multiclass_ce(hot, &[1]).unwrap();
        assert!(g.scalar(l) < 1e-20);
        assert!(matches!(g.multiclass_ce(hot, &[3]), Err(Error::Index(_))));
    }

    #[test]
    fn multiclass_matches_naive_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = rand_tensor(&mut rng, vec![4, 3]);
        let d = [0usize, 2, 1, 1];
        let mut naive = 0.0;
        for i in 0..4 {
            let row = &t.data()[i * 3..i * 3 + 3];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            naive -= (row[d[i]].exp() / z).ln();
        }
        naive /= 4.0;
        let mut g = Graph::new();
        let v = g.constant(&t);
        let l = g.multiclass_ce(v, &d).unwrap();
        assert!((g.scalar(l) - naive).abs() < 1e-12);
    }

    #[test]
    fn grad_reverse_forward_and_zero_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, vec![3, 2]);
        let mut g = Graph::new();
        let xv = g.param(&x);
        let r = g.grad_reverse(xv, 0.0);
        let bits = |v: &[f64]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(g.value(r)), bits(x.data()));
        let l = g.multiclass_ce(r, &[0, 1, 1]).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(xv).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn every_op_passes_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(&mut rng, vec![5, 3]);
        let w1 = rand_tensor(&mut rng, vec![3, 4]);
        let b1 = rand_tensor(&mut rng, vec![4]);
        let w2 = rand_tensor(&mut rng, vec![4, 3]);
        let b2 = rand_tensor(&mut rng, vec![3]);
        let targets = [1.0, 0.0, 1.0, 1.0, 0.0];
        let classes = [0usize, 2, 1, 0, 2];
        let forward = |xt: &Tensor, g: &mut Graph| -> (Var, Var) {
            let xv = g.param(xt);
            let (a, b, c, d) = (
                g.constant(&w1),
                g.constant(&b1),
                g.constant(&w2),
                g.constant(&b2),
            );
            let h = g.linear(xv, a, b).unwrap();
            let h = g.relu(h);
            let o = g.linear(h, c, d).unwrap();
            let sig = g.sigmoid(o);
            let picked = g.gather_rows(o, &[0, 2, 4, 1, 3]).unwrap();
            let ce = g.multiclass_ce(picked, &classes).unwrap();
            let col = g.gather_rows(sig, &[0, 1, 2, 3, 4]).unwrap();
            let m = g.mean(col);
            let s = g.linear(xv, a, b).unwrap();
            let s = g.gather_rows(s, &[0, 1, 2, 3, 4]).unwrap();
            let single = g.constant(&Tensor::new(vec![4, 1], vec![0.3, -0.2, 0.5, 0.1]).unwrap());
            let zero = g.constant(&Tensor::zeros(vec![1]));
            let logit = g.linear(s, single, zero).unwrap();
            let bce = g.weighted_bce(logit, &targets, 1.7).unwrap();
            let r = g.grad_reverse(m, 0.7);
            let t = g.add(ce, bce).unwrap();
            let t = g.add(t, r).unwrap();
            (xv, g.scale(t, 1.3))
        };
        let mut g = Graph::new();
        let (xv, out) = forward(&x, &mut g);
        let grads = g.backward(out).unwrap();
        let analytic = grads.get(xv).unwrap().to_vec();

        // Oracle on the same net where the reversal is written as -lambda * term.
        let f = |xt: &Tensor| {
            let mut g = Graph::new();
            let xv = g.param(xt);
            let (a, b, c, d) = (
                g.constant(&w1),
                g.constant(&b1),
                g.constant(&w2),
                g.constant(&b2),
            );
            let h = g.linear(xv, a, b).unwrap();
            let h = g.relu(h);
            let o = g.linear(h, c, d).unwrap();
            let sig = g.sigmoid(o);
            let picked = g.gather_rows(o, &[0, 2, 4, 1, 3]).unwrap();
            let ce = g.multiclass_ce(picked, &classes).unwrap();
            let ce = g.scalar(ce);
            let m = g.value(sig).iter().sum::<f64>() / 15.0;
            let s = g.linear(xv, a, b).unwrap();
            let single = g.constant(&Tensor::new(vec![4, 1], vec![0.3, -0.2, 0.5, 0.1]).unwrap());
            let zero = g.constant(&Tensor::zeros(vec![1]));
            let logit = g.linear(s, single, zero).unwrap();
            let bce = g.weighted_bce(logit, &targets, 1.7).unwrap();
            let bce = g.scalar(bce);
            1.3 * (ce + bce - 0.7 * m)
        };
        assert_close(&analytic, &numeric_grad(&x, f), 1e-4);
    }

    #[test]
    fn sgd_examples() {
        let mut p = Tensor::new(vec![1], vec![1.0]).unwrap().requires_grad(true);
        p.grad = Some(vec![1.0]);
        sgd_step([&mut p], 0.1, 0.0).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-15);
        assert!(p.grad().is_none());

        let mut q = Tensor::new(vec![1], vec![1.0]).unwrap().requires_grad(true);
        q.grad = Some(vec![0.0]);
        sgd_step([&mut q], 0.1, 0.5).unwrap();
        assert!((q.data()[0] - 0.95).abs() < 1e-15);

        let err = sgd_step([&mut q], 0.1, 0.0).unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn clipping_rescales_joint_norm() {
        let mut a = Tensor::zeros(vec![1]).requires_grad(true);
        let mut b = Tensor::zeros(vec![1]).requires_grad(true);
        a.grad = Some(vec![3.0]);
        b.grad = Some(vec![4.0]);
        assert_eq!(clip_grad_norm([&mut a, &mut b], 1.0), 5.0);
        assert!((a.grad().unwrap()[0] - 0.6).abs() < 1e-15);
        assert!((b.grad().unwrap()[0] - 0.8).abs() < 1e-15);
        assert!((clip_grad_norm([&mut a, &mut b], 10.0) - 1.0).abs() < 1e-15);
        assert!((a.grad().unwrap()[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn sgd_is_deterministic() {
        let run = || {
            let mut p = Tensor::new(vec![2], vec![0.3, -0.7])
                .unwrap()
                .requires_grad(true);
            for step in 0..2 {
                p.grad = Some(vec![0.1 * step as f64, 0.25]);
                sgd_step([&mut p], 0.05, 0.01).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_round_trip_and_rejects_garbage() {
        let a = Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, 1e-300, f64::MAX]).unwrap();
        let b = Tensor::scalar(7.0);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &[("enc.w0".into(), &a), ("bias".into(), &b)]).unwrap();
        assert_eq!(&buf[..4], b"LMCK");
        assert_eq!(buf[4], 1);
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back[0].0, "enc.w0");
        assert_eq!(back[0].1.data(), a.data());
        assert_eq!(back[1].1.shape(), &[] as &[usize]);
        assert!(read_checkpoint(&b"XXXX\x01"[..]).is_err());
        assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
    }
}
