use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Operation selector for [`Graph::apply`], carrying each op's attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    ScalarMul(f64),
    ElementwiseMul,
    /// Mean over axis 0 (result `[1, m]`) or axis 1 (result `[n, 1]`).
    MeanOverAxis(usize),
    /// Concatenation along axis 0 (rows) or 1 (columns).
    Concat(usize),
    SliceRows { start: usize, len: usize },
    SliceCols { start: usize, len: usize },
    GatherRows(Vec<usize>),
    Softmax,
    LayerNorm { eps: f64 },
    Gelu,
    Relu,
    Square,
    Sum,
    Log,
    CrossEntropyWithLogits(Vec<usize>),
    Transpose,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, bool),
    Sub(Var, Var, bool),
    Mul(Var, Var, bool),
    ScalarMul(Var, f64),
    Mean(Var, usize),
    Concat(Vec<Var>, usize),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Gather(Var, Vec<usize>),
    Softmax(Var),
    LayerNorm { x: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu(Var),
    Relu(Var),
    Square(Var),
    Sum(Var),
    Log(Var),
    CrossEntropy { x: Var, targets: Vec<usize>, probs: Vec<f64> },
    Transpose(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run computation graph. Nodes are appended in creation order,
/// so parents always precede children and the graph is acyclic.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root, keyed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn contains(&self, var: Var) -> bool {
        self.get(var).is_some()
    }

    /// Gradients for `vars` in order; fails on the first one without an entry.
    pub fn collect(&self, vars: &[Var]) -> Result<Vec<Tensor>> {
        vars.iter()
            .enumerate()
            .map(|(index, &v)| self.get(v).cloned().ok_or(Error::MissingGradient { index }))
            .collect()
    }
}

fn matmul_kernel(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose_kernel(a: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = a[i * m + j];
        }
    }
    out
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if !t.is_matrix() {
        return Err(Error::shape(op, format!("expected a matrix, got shape {:?}", t.shape())));
    }
    Ok((t.rows(), t.cols()))
}

/// Either identical shapes, or a `[1, m]` right operand broadcast over the rows of `[n, m]`.
fn broadcast_rows(op: &'static str, a: &Tensor, b: &Tensor) -> Result<bool> {
    if a.shape() == b.shape() {
        return Ok(false);
    }
    if a.is_matrix() && b.is_matrix() && b.rows() == 1 && b.cols() == a.cols() {
        return Ok(true);
    }
    Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())))
}

fn zip_broadcast(a: &Tensor, b: &Tensor, bcast: bool, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    if bcast {
        let m = b.numel();
        a.data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, b.data()[i % m]))
            .collect()
    } else {
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
    }
}

/// Folds a full-shape gradient back onto a row-broadcast operand.
fn reduce_rows(g: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; m];
    for (i, v) in g.iter().enumerate() {
        out[i % m] += v;
    }
    out
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

    /// Registers a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Registers a frozen leaf; it never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Generic entry point dispatching on `kind`.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let name = format!("{kind:?}");
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::shape("apply", format!("{name} takes {n} inputs, got {}", inputs.len())))
            }
        };
        match kind {
            OpKind::Concat(axis) => self.concat(inputs, axis),
            OpKind::MatMul | OpKind::Add | OpKind::Sub | OpKind::ElementwiseMul => {
                arity(2)?;
                let (a, b) = (inputs[0], inputs[1]);
                match kind {
                    OpKind::MatMul => self.matmul(a, b),
                    OpKind::Add => self.add(a, b),
                    OpKind::Sub => self.sub(a, b),
                    _ => self.mul(a, b),
                }
            }
            other => {
                arity(1)?;
                let x = inputs[0];
                match other {
                    OpKind::ScalarMul(s) => Ok(self.scalar_mul(x, s)),
                    OpKind::MeanOverAxis(axis) => self.mean_axis(x, axis),
                    OpKind::SliceRows { start, len } => self.slice_rows(x, start, len),
                    OpKind::SliceCols { start, len } => self.slice_cols(x, start, len),
                    OpKind::GatherRows(idx) => self.gather_rows(x, &idx),
                    OpKind::Softmax => self.softmax(x),
                    OpKind::LayerNorm { eps } => self.layer_norm(x, eps),
                    OpKind::Gelu => Ok(self.gelu(x)),
                    OpKind::Relu => Ok(self.relu(x)),
                    OpKind::Square => Ok(self.square(x)),
                    OpKind::Sum => Ok(self.sum(x)),
                    OpKind::Log => Ok(self.log(x)),
                    OpKind::CrossEntropyWithLogits(targets) => self.cross_entropy(x, &targets),
                    OpKind::Transpose => self.transpose(x),
                    _ => unreachable!("binary ops handled above"),
                }
            }
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = require_matrix("matmul", self.value(a))?;
        let (k2, m) = require_matrix("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{n}, {k}] x [{k2}, {m}]")));
        }
        let out = matmul_kernel(self.value(a).data(), self.value(b).data(), n, k, m);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::MatMul(a, b), &[a, b]))
    }

    /// Elementwise sum; `b` may be a `[1, m]` row broadcast over `a`'s rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = broadcast_rows("add", self.value(a), self.value(b))?;
        let out = zip_broadcast(self.value(a), self.value(b), bc, |x, y| x + y);
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Add(a, b, bc), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = broadcast_rows("sub", self.value(a), self.value(b))?;
        let out = zip_broadcast(self.value(a), self.value(b), bc, |x, y| x - y);
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Sub(a, b, bc), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = broadcast_rows("elementwise_mul", self.value(a), self.value(b))?;
        let out = zip_broadcast(self.value(a), self.value(b), bc, |x, y| x * y);
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Mul(a, b, bc), &[a, b]))
    }

    pub fn scalar_mul(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).map(|v| v * s);
        self.push(value, Op::ScalarMul(x, s), &[x])
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (n, m) = require_matrix("mean_over_axis", self.value(x))?;
        let d = self.value(x).data();
        let value = match axis {
            0 => {
                let mut out = vec![0.0; m];
                for i in 0..n {
                    for (o, v) in out.iter_mut().zip(&d[i * m..(i + 1) * m]) {
                        *o += v;
                    }
                }
                out.iter_mut().for_each(|o| *o /= n as f64);
                Tensor::from_parts(vec![1, m], out)
            }
            1 => {
                let out = (0..n)
                    .map(|i| d[i * m..(i + 1) * m].iter().sum::<f64>() / m as f64)
                    .collect();
                Tensor::from_parts(vec![n, 1], out)
            }
            _ => return Err(Error::shape("mean_over_axis", format!("axis {axis} on a matrix"))),
        };
        Ok(self.push(value, Op::Mean(x, axis), &[x]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let dims = parts
            .iter()
            .map(|&p| require_matrix("concat", self.value(p)))
            .collect::<Result<Vec<_>>>()?;
        let value = match axis {
            0 => {
                let m = dims[0].1;
                if let Some(bad) = dims.iter().find(|d| d.1 != m) {
                    return Err(Error::shape("concat", format!("row width {} vs {m}", bad.1)));
                }
                let n = dims.iter().map(|d| d.0).sum();
                let mut out = Vec::with_capacity(n * m);
                for &p in parts {
                    out.extend_from_slice(self.value(p).data());
                }
                Tensor::from_parts(vec![n, m], out)
            }
            1 => {
                let n = dims[0].0;
                if let Some(bad) = dims.iter().find(|d| d.0 != n) {
                    return Err(Error::shape("concat", format!("row count {} vs {n}", bad.0)));
                }
                let m: usize = dims.iter().map(|d| d.1).sum();
                let mut out = Vec::with_capacity(n * m);
                for i in 0..n {
                    for &p in parts {
                        out.extend_from_slice(self.value(p).row(i));
                    }
                }
                Tensor::from_parts(vec![n, m], out)
            }
            _ => return Err(Error::shape("concat", format!("axis {axis} on matrices"))),
        };
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis), parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, m) = require_matrix("slice_rows", self.value(x))?;
        if len == 0 || start + len > n {
            return Err(Error::shape("slice_rows", format!("rows {start}..{} of {n}", start + len)));
        }
        let out = self.value(x).data()[start * m..(start + len) * m].to_vec();
        Ok(self.push(Tensor::from_parts(vec![len, m], out), Op::SliceRows(x, start), &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, m) = require_matrix("slice_cols", self.value(x))?;
        if len == 0 || start + len > m {
            return Err(Error::shape("slice_cols", format!("cols {start}..{} of {m}", start + len)));
        }
        let src = self.value(x);
        let out = (0..n)
            .flat_map(|i| src.row(i)[start..start + len].iter().copied())
            .collect();
        Ok(self.push(Tensor::from_parts(vec![n, len], out), Op::SliceCols(x, start), &[x]))
    }

    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let (n, m) = require_matrix("gather_rows", self.value(x))?;
        if indices.is_empty() {
            return Err(Error::shape("gather_rows", "no indices"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather_rows", format!("index {bad} into {n} rows")));
        }
        let src = self.value(x);
        let out = indices.iter().flat_map(|&i| src.row(i).iter().copied()).collect();
        let value = Tensor::from_parts(vec![indices.len(), m], out);
        Ok(self.push(value, Op::Gather(x, indices.to_vec()), &[x]))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (n, m) = require_matrix("softmax", self.value(x))?;
        let d = self.value(x).data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &d[i * m..(i + 1) * m];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[i * m..(i + 1) * m];
            let mut z = 0.0;
            for (oj, &v) in o.iter_mut().zip(row) {
                *oj = (v - mx).exp();
                z += *oj;
            }
            o.iter_mut().for_each(|v| *v /= z);
        }
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::Softmax(x), &[x]))
    }

    /// Row-wise normalization to zero mean and unit variance, without affine terms.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (n, m) = require_matrix("layer_norm", self.value(x))?;
        let d = self.value(x).data();
        let mut xhat = vec![0.0; n * m];
        let mut inv_std = vec![0.0; n];
        for i in 0..n {
            let row = &d[i * m..(i + 1) * m];
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for (o, &v) in xhat[i * m..(i + 1) * m].iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
        }
        let value = Tensor::from_parts(vec![n, m], xhat.clone());
        Ok(self.push(value, Op::LayerNorm { x, xhat, inv_std }, &[x]))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu);
        self.push(value, Op::Gelu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        self.push(value, Op::Square(x), &[x])
    }

    /// Sum of all entries, as a `[1, 1]` scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::ln);
        self.push(value, Op::Log(x), &[x])
    }

    /// Mean over rows of `logsumexp(row) - row[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, m) = require_matrix("cross_entropy_with_logits", self.value(logits))?;
        if targets.len() != n {
            return Err(Error::shape(
                "cross_entropy_with_logits",
                format!("{} targets for {n} rows", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= m) {
            return Err(Error::shape("cross_entropy_with_logits", format!("target {bad} with {m} classes")));
        }
        let d = self.value(logits).data();
        let mut probs = vec![0.0; n * m];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &d[i * m..(i + 1) * m];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let lse = mx + z.ln();
            loss += lse - row[targets[i]];
            for (p, &v) in probs[i * m..(i + 1) * m].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let value = Tensor::scalar(loss / n as f64);
        let op = Op::CrossEntropy {
            x: logits,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push(value, op, &[logits]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        require_matrix("transpose", self.value(x))?;
        let value = self.value(x).transpose();
        Ok(self.push(value, Op::Transpose(x), &[x]))
    }

    /// `mean(x)` over every entry.
    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scalar_mul(s, 1.0 / n)
    }

    /// Reverse-mode sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        if root_value.numel() != 1 {
            return Err(Error::NonScalarRoot {
                shape: root_value.shape().to_vec(),
            });
        }
        let mut acc: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        if self.nodes[root.0].requires_grad {
            acc[root.0] = Some(vec![1.0]);
        }
        for id in (0..=root.0).rev() {
            let Some(g) = acc[id].take() else { continue };
            self.propagate(id, &g, &mut acc);
            acc[id] = Some(g);
        }
        let grads = acc
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                g.filter(|_| self.nodes[id].requires_grad)
                    .map(|g| Tensor::from_parts(self.nodes[id].value.shape().to_vec(), g))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: usize, g: &[f64], acc: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let mut send = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut acc[v.0] {
                Some(buf) => buf.iter_mut().zip(&contrib).for_each(|(b, c)| *b += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let at = &self.nodes[a.0].value;
                let bt = &self.nodes[b.0].value;
                let (n, k, m) = (at.rows(), at.cols(), bt.cols());
                if self.nodes[a.0].requires_grad {
                    let b_t = transpose_kernel(bt.data(), k, m);
                    send(*a, matmul_kernel(g, &b_t, n, m, k));
                }
                if self.nodes[b.0].requires_grad {
                    let a_t = transpose_kernel(at.data(), n, k);
                    send(*b, matmul_kernel(&a_t, g, k, n, m));
                }
            }
            Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                send(*a, g.to_vec());
                let gb: Vec<f64> = g.iter().map(|v| sign * v).collect();
                let gb = if *bc { reduce_rows(&gb, self.nodes[b.0].value.numel()) } else { gb };
                send(*b, gb);
            }
            Op::Mul(a, b, bc) => {
                let (av, bv) = (val(*a), val(*b));
                let m = bv.len();
                if self.nodes[a.0].requires_grad {
                    let ga = g
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| gi * if *bc { bv[i % m] } else { bv[i] })
                        .collect();
                    send(*a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    let full: Vec<f64> = g.iter().zip(av).map(|(gi, x)| gi * x).collect();
                    send(*b, if *bc { reduce_rows(&full, m) } else { full });
                }
            }
            Op::ScalarMul(x, s) => send(*x, g.iter().map(|v| v * s).collect()),
            Op::Mean(x, axis) => {
                let xt = &self.nodes[x.0].value;
                let (n, m) = (xt.rows(), xt.cols());
                let out = match axis {
                    0 => (0..n * m).map(|i| g[i % m] / n as f64).collect(),
                    _ => (0..n * m).map(|i| g[i / m] / m as f64).collect(),
                };
                send(*x, out);
            }
            Op::Concat(parts, axis) => {
                let total_cols = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let pt = &self.nodes[p.0].value;
                    let (n, m) = (pt.rows(), pt.cols());
                    let piece = if *axis == 0 {
                        g[offset * m..(offset + n) * m].to_vec()
                    } else {
                        (0..n)
                            .flat_map(|i| g[i * total_cols + offset..i * total_cols + offset + m].iter().copied())
                            .collect()
                    };
                    offset += if *axis == 0 { n } else { m };
                    send(p, piece);
                }
            }
            Op::SliceRows(x, start) => {
                let xt = &self.nodes[x.0].value;
                let m = xt.cols();
                let mut out = vec![0.0; xt.numel()];
                out[start * m..start * m + g.len()].copy_from_slice(g);
                send(*x, out);
            }
            Op::SliceCols(x, start) => {
                let xt = &self.nodes[x.0].value;
                let (n, m) = (xt.rows(), xt.cols());
                let len = node.value.cols();
                let mut out = vec![0.0; n * m];
                for i in 0..n {
                    out[i * m + start..i * m + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                send(*x, out);
            }
            Op::Gather(x, indices) => {
                let xt = &self.nodes[x.0].value;
                let m = xt.cols();
                let mut out = vec![0.0; xt.numel()];
                for (r, &i) in indices.iter().enumerate() {
                    for j in 0..m {
                        out[i * m + j] += g[r * m + j];
                    }
                }
                send(*x, out);
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let m = node.value.cols();
                let mut out = vec![0.0; y.len()];
                for i in 0..node.value.rows() {
                    let r = i * m..(i + 1) * m;
                    let dot: f64 = g[r.clone()].iter().zip(&y[r.clone()]).map(|(a, b)| a * b).sum();
                    for j in r {
                        out[j] = y[j] * (g[j] - dot);
                    }
                }
                send(*x, out);
            }
            Op::LayerNorm { x, xhat, inv_std } => {
                let m = node.value.cols();
                let mut out = vec![0.0; xhat.len()];
                for (i, inv) in inv_std.iter().enumerate() {
                    let r = i * m..(i + 1) * m;
                    let mg = g[r.clone()].iter().sum::<f64>() / m as f64;
                    let mgx = g[r.clone()].iter().zip(&xhat[r.clone()]).map(|(a, b)| a * b).sum::<f64>() / m as f64;
                    for j in r {
                        out[j] = inv * (g[j] - mg - xhat[j] * mgx);
                    }
                }
                send(*x, out);
            }
            Op::Gelu(x) => send(*x, g.iter().zip(val(*x)).map(|(gi, &v)| gi * gelu_grad(v)).collect()),
            Op::Relu(x) => send(*x, g.iter().zip(val(*x)).map(|(gi, &v)| if v > 0.0 { *gi } else { 0.0 }).collect()),
            Op::Square(x) => send(*x, g.iter().zip(val(*x)).map(|(gi, v)| 2.0 * v * gi).collect()),
            Op::Sum(x) => send(*x, vec![g[0]; self.nodes[x.0].value.numel()]),
            Op::Log(x) => send(*x, g.iter().zip(val(*x)).map(|(gi, v)| gi / v).collect()),
            Op::CrossEntropy { x, targets, probs } => {
                let m = self.nodes[x.0].value.cols();
                let scale = g[0] / targets.len() as f64;
                let mut out: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &t) in targets.iter().enumerate() {
                    out[i * m + t] -= scale;
                }
                send(*x, out);
            }
            Op::Transpose(x) => {
                let (n, m) = (node.value.rows(), node.value.cols());
                send(*x, transpose_kernel(g, n, m));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_by_hand() {
        let mut g = Graph::new();
        let a = g.constant(mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = g.constant(mat(&[&[1.0], &[1.0]]));
        let c = g.apply(OpKind::MatMul, &[a, b]).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 1]);
        assert_eq!(g.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row_vector(&[0.0, 0.0]));
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row_vector(&[2.0, 2.0, 2.0]));
        let y = g.layer_norm(x, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row_vector(&[1.0, 2.0, 3.0]));
        let sq = g.square(x);
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn frozen_leaf_has_no_gradient() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row_vector(&[1.0, 2.0]));
        let w = g.param(Tensor::row_vector(&[3.0, 4.0]));
        let p = g.mul(x, w).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row_vector(&[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarRoot { .. })));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3] x [2, 3]"), "{err}");
        let c = g.constant(Tensor::zeros(&[3, 2]));
        let err = g.add(a, c).unwrap_err().to_string();
        assert!(err.contains("add"), "{err}");
    }

    #[test]
    fn row_broadcast_gradient_sums_over_rows() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[3, 2]));
        let b = g.param(Tensor::row_vector(&[1.0, 1.0]));
        let c = g.add(a, b).unwrap();
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn cross_entropy_matches_hand_value() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row_vector(&[0.0, 0.0, 0.0, 0.0]));
        let l = g.cross_entropy(x, &[2]).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-15);
    }
}
