//! Wengert-list reverse-mode differentiation.
//!
//! Nodes are appended in execution order; `backward` walks them in reverse
//! once. A node only propagates into inputs that transitively depend on a
//! tracked leaf, so frozen weights never receive a gradient buffer.

use super::kernels::{self, axis_split};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Gelu,
    QuickGelu,
    Sigmoid,
    Log,
    Exp,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    Unary(Var, Unary),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Reshape(Var),
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    Bce {
        p: Var,
        labels: Vec<f64>,
        eps: f64,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | MatMulNt(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b)
            | MulCol(a, b) => vec![*a, *b],
            Transpose(a) | Scale(a, _) | MulConst(a, _) | Unary(a, _) | Reshape(a) | Sum(a)
            | Mean(a) => vec![*a],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Softmax { x, .. } | SliceCols { x, .. } | SumAxis { x, .. } => vec![*x],
            GatherRows { table, .. } => vec![*table],
            ConcatCols(vs) | ConcatRows(vs) => vs.clone(),
            Attention { q, k, v, .. } => vec![*q, *k, *v],
            Bce { p, .. } => vec![*p],
        }
    }
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Single-owner recording of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Accumulate the gradient of `v` into `tensor.grad` when the tensor is tracked.
    pub fn write_into(&self, v: Var, tensor: &mut Tensor) {
        if !tensor.requires_grad {
            return;
        }
        if let Some(g) = self.get(v) {
            match tensor.grad.as_mut() {
                Some(existing) => existing.iter_mut().zip(g).for_each(|(e, x)| *e += x),
                None => tensor.grad = Some(g.to_vec()),
            }
        }
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::shape(op, a, b))
    }
}

fn dims2(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::shape(op, shape, &[0, 0])),
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record a tensor as a leaf; it is differentiated iff `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            needs_grad: t.requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape node shapes are valid")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul", self.shape(a))?;
        let (k2, n) = dims2("matmul", self.shape(b))?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_into(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`; the natural form for `x · Wᵀ` linear layers.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul_nt", self.shape(a))?;
        let (n, k2) = dims2("matmul_nt", self.shape(b))?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt_into(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push(vec![m, n], out, Op::MatMulNt(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims2("transpose", self.shape(a))?;
        let out = kernels::transpose2(self.value(a), r, c);
        Ok(self.push(vec![c, r], out, Op::Transpose(a)))
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.shape(a), self.shape(b))?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.shape(a), self.shape(b))?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b)))
    }

    /// Broadcast-add a length-`n` vector to every row of an `[m×n]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, n) = dims2("add_row", self.shape(a))?;
        if self.value(row).len() != n {
            return Err(Error::shape("add_row", self.shape(a), self.shape(row)));
        }
        let r = self.value(row).to_vec();
        let mut out = self.value(a).to_vec();
        out.chunks_mut(n)
            .for_each(|c| c.iter_mut().zip(&r).for_each(|(x, y)| *x += y));
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddRow(a, row)))
    }

    /// Scale row `i` of an `[m×n]` matrix by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (m, n) = dims2("mul_col", self.shape(a))?;
        if self.value(col).len() != m {
            return Err(Error::shape("mul_col", self.shape(a), self.shape(col)));
        }
        let c = self.value(col).to_vec();
        let mut out = self.value(a).to_vec();
        out.chunks_mut(n)
            .zip(&c)
            .for_each(|(row, s)| row.iter_mut().for_each(|x| *x *= s));
        Ok(self.push(self.shape(a).to_vec(), out, Op::MulCol(a, col)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * s).collect();
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, s))
    }

    /// Elementwise product with an untracked constant of the same length.
    pub fn mul_const(&mut self, a: Var, c: Vec<f64>) -> Result<Var> {
        if c.len() != self.value(a).len() {
            return Err(Error::shape("mul_const", self.shape(a), &[c.len()]));
        }
        let out = self.value(a).iter().zip(&c).map(|(x, y)| x * y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::MulConst(a, c)))
    }

    fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Gelu => kernels::gelu,
            Unary::QuickGelu => kernels::quick_gelu,
            Unary::Sigmoid => kernels::sigmoid,
            Unary::Log => f64::ln,
            Unary::Exp => f64::exp,
        };
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        self.push(self.shape(a).to_vec(), out, Op::Unary(a, kind))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    pub fn quick_gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::QuickGelu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    /// Layer norm over the last dimension of an `[m×n]` matrix.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (_, n) = dims2("layer_norm", self.shape(x))?;
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let (out, xhat, rstd) =
            kernels::layer_norm_rows(self.value(x), self.value(gamma), self.value(beta), n, eps);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidShape(format!(
                "softmax axis {axis} out of range for {shape:?}"
            )));
        }
        let mut out = self.value(x).to_vec();
        kernels::softmax_axis(&mut out, &shape, axis);
        Ok(self.push(shape, out, Op::Softmax { x, axis }))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::shape("reshape", self.shape(x), &shape));
        }
        let out = self.value(x).to_vec();
        Ok(self.push(shape, out, Op::Reshape(x)))
    }

    /// Embedding lookup: rows of `table` selected by `idx`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (rows, n) = dims2("gather_rows", self.shape(table))?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidShape(format!(
                "row index {bad} out of range for {rows} rows"
            )));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&t[i * n..(i + 1) * n]);
        }
        Ok(self.push(
            vec![idx.len(), n],
            out,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidShape("concat of nothing".into()))?;
        let (m, _) = dims2("concat_cols", self.shape(first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (mp, w) = dims2("concat_cols", self.shape(p))?;
            if mp != m {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(w);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push(vec![m, total], out, Op::ConcatCols(parts.to_vec())))
    }

    /// Vertical stack of matrices sharing a column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidShape("concat of nothing".into()))?;
        let (_, n) = dims2("concat_rows", self.shape(first))?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (m, w) = dims2("concat_rows", self.shape(p))?;
            if w != n {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += m;
            out.extend_from_slice(self.value(p));
        }
        Ok(self.push(vec![rows, n], out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (m, n) = dims2("slice_cols", self.shape(x))?;
        if width == 0 || start + width > n {
            return Err(Error::InvalidShape(format!(
                "column slice {start}..{} out of range for width {n}",
                start + width
            )));
        }
        let v = self.value(x);
        let mut out = Vec::with_capacity(m * width);
        for r in 0..m {
            out.extend_from_slice(&v[r * n + start..r * n + start + width]);
        }
        Ok(self.push(vec![m, width], out, Op::SliceCols { x, start }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push(vec![1], vec![s], Op::Mean(x))
    }

    /// Reduce one axis by summation; the axis is removed from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidShape(format!(
                "axis {axis} out of range for {shape:?}"
            )));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let v = self.value(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += v[(o * len + j) * inner + i];
                }
            }
        }
        let mut new_shape = shape.clone();
        new_shape.remove(axis);
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        Ok(self.push(new_shape, out, Op::SumAxis { x, axis }))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::InvalidShape(format!("axis {axis} out of range")))?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / len as f64))
    }

    /// Multi-head scaled dot-product attention over `batch` independent
    /// sequences stacked row-wise in `q`, `k`, `v` (each `[batch·T × d]`).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, heads: usize) -> Result<Var> {
        let (rows, d) = dims2("attention", self.shape(q))?;
        same_shape("attention", self.shape(q), self.shape(k))?;
        same_shape("attention", self.shape(q), self.shape(v))?;
        if batch == 0 || rows % batch != 0 || heads == 0 || d % heads != 0 {
            return Err(Error::InvalidShape(format!(
                "attention: {rows} rows, width {d}, batch {batch}, heads {heads}"
            )));
        }
        let (out, probs) = kernels::attention_forward(self.value(q), self.value(k), self.value(v), batch, heads, d);
        Ok(self.push(
            vec![rows, d],
            out,
            Op::Attention {
                q,
                k,
                v,
                batch,
                heads,
                probs,
            },
        ))
    }

    /// Mean binary cross-entropy of probabilities `p` against 0/1 labels,
    /// with probabilities clamped to `[eps, 1 − eps]`.
    pub fn bce(&mut self, p: Var, labels: &[f64], eps: f64) -> Result<Var> {
        if self.value(p).len() != labels.len() {
            return Err(Error::shape("bce", self.shape(p), &[labels.len()]));
        }
        let n = labels.len() as f64;
        let loss = self
            .value(p)
            .iter()
            .zip(labels)
            .map(|(&pv, &y)| {
                let c = pv.clamp(eps, 1.0 - eps);
                -(y * c.ln() + (1.0 - y) * (1.0 - c).ln())
            })
            .sum::<f64>()
            / n;
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::Bce {
                p,
                labels: labels.to_vec(),
                eps,
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(buf);
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let add_into = |buf: &mut [f64], src: &[f64]| {
            buf.iter_mut().zip(src).for_each(|(b, s)| *b += s);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.needs_grad(*a) {
                    let mut ga = vec![0.0; m * k];
                    kernels::matmul_nt_into(g, self.value(*b), &mut ga, m, n, k);
                    self.acc(grads, *a, |buf| add_into(buf, &ga));
                }
                if self.needs_grad(*b) {
                    let mut gb = vec![0.0; k * n];
                    kernels::matmul_tn_into(self.value(*a), g, &mut gb, m, k, n);
                    self.acc(grads, *b, |buf| add_into(buf, &gb));
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                if self.needs_grad(*a) {
                    let mut ga = vec![0.0; m * k];
                    kernels::matmul_into(g, self.value(*b), &mut ga, m, n, k);
                    self.acc(grads, *a, |buf| add_into(buf, &ga));
                }
                if self.needs_grad(*b) {
                    let mut gb = vec![0.0; n * k];
                    kernels::matmul_tn_into(g, self.value(*a), &mut gb, m, n, k);
                    self.acc(grads, *b, |buf| add_into(buf, &gb));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                let gt = kernels::transpose2(g, c, r);
                self.acc(grads, *a, |buf| add_into(buf, &gt));
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |buf| add_into(buf, g));
                self.acc(grads, *b, |buf| add_into(buf, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |buf| add_into(buf, g));
                self.acc(grads, *b, |buf| buf.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |buf| {
                    buf.iter_mut()
                        .zip(g.iter().zip(vb))
                        .for_each(|(x, (gi, bi))| *x += gi * bi)
                });
                self.acc(grads, *b, |buf| {
                    buf.iter_mut()
                        .zip(g.iter().zip(va))
                        .for_each(|(x, (gi, ai))| *x += gi * ai)
                });
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, |buf| add_into(buf, g));
                let n = self.value(*row).len();
                self.acc(grads, *row, |buf| {
                    g.chunks(n).for_each(|c| add_into(buf, c));
                });
            }
            Op::MulCol(a, col) => {
                let n = self.shape(*a)[1];
                let (va, vc) = (self.value(*a), self.value(*col));
                self.acc(grads, *a, |buf| {
                    buf.chunks_mut(n)
                        .zip(g.chunks(n))
                        .zip(vc)
                        .for_each(|((b, gr), s)| b.iter_mut().zip(gr).for_each(|(x, y)| *x += y * s));
                });
                self.acc(grads, *col, |buf| {
                    for (i, b) in buf.iter_mut().enumerate() {
                        *b += g[i * n..(i + 1) * n]
                            .iter()
                            .zip(&va[i * n..(i + 1) * n])
                            .map(|(x, y)| x * y)
                            .sum::<f64>();
                    }
                });
            }
            Op::Scale(a, s) => {
                self.acc(grads, *a, |buf| buf.iter_mut().zip(g).for_each(|(x, y)| *x += s * y));
            }
            Op::MulConst(a, c) => {
                self.acc(grads, *a, |buf| {
                    buf.iter_mut()
                        .zip(g.iter().zip(c))
                        .for_each(|(x, (gi, ci))| *x += gi * ci)
                });
            }
            Op::Unary(a, kind) => {
                let xs = self.value(*a);
                let ys = &node.value;
                self.acc(grads, *a, |buf| {
                    for i in 0..buf.len() {
                        let d = match kind {
                            Unary::Gelu => kernels::gelu_grad(xs[i]),
                            Unary::QuickGelu => kernels::quick_gelu_grad(xs[i]),
                            Unary::Sigmoid => ys[i] * (1.0 - ys[i]),
                            Unary::Log => 1.0 / xs[i],
                            Unary::Exp => ys[i],
                        };
                        buf[i] += g[i] * d;
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = self.value(*gamma).len();
                let gm = self.value(*gamma);
                self.acc(grads, *x, |buf| {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let xh = &xhat[r * n..(r + 1) * n];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..n {
                            let d = gr[c] * gm[c];
                            mean_d += d;
                            mean_dx += d * xh[c];
                        }
                        mean_d /= n as f64;
                        mean_dx /= n as f64;
                        for c in 0..n {
                            let d = gr[c] * gm[c];
                            buf[r * n + c] += rs * (d - mean_d - xh[c] * mean_dx);
                        }
                    }
                });
                self.acc(grads, *gamma, |buf| {
                    for (gr, xh) in g.chunks(n).zip(xhat.chunks(n)) {
                        for c in 0..n {
                            buf[c] += gr[c] * xh[c];
                        }
                    }
                });
                self.acc(grads, *beta, |buf| g.chunks(n).for_each(|gr| add_into(buf, gr)));
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(&node.shape, *axis);
                let y = &node.value;
                self.acc(grads, *x, |buf| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + i;
                            let dot: f64 = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..len {
                                buf[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Reshape(a) => self.acc(grads, *a, |buf| add_into(buf, g)),
            Op::GatherRows { table, idx } => {
                let n = node.shape[1];
                self.acc(grads, *table, |buf| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut buf[i * n..(i + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (m, total) = (node.shape[0], node.shape[1]);
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    self.acc(grads, p, |buf| {
                        for r in 0..m {
                            add_into(
                                &mut buf[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.acc(grads, p, |buf| add_into(buf, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::SliceCols { x, start } => {
                let n = self.shape(*x)[1];
                let (m, w) = (node.shape[0], node.shape[1]);
                self.acc(grads, *x, |buf| {
                    for r in 0..m {
                        add_into(
                            &mut buf[r * n + start..r * n + start + w],
                            &g[r * w..(r + 1) * w],
                        );
                    }
                });
            }
            Op::Sum(a) => self.acc(grads, *a, |buf| buf.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let s = g[0] / self.value(*a).len() as f64;
                self.acc(grads, *a, |buf| buf.iter_mut().for_each(|x| *x += s));
            }
            Op::SumAxis { x, axis } => {
                let (outer, len, inner) = axis_split(self.shape(*x), *axis);
                self.acc(grads, *x, |buf| {
                    for o in 0..outer {
                        for j in 0..len {
                            for i in 0..inner {
                                buf[(o * len + j) * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *batch, *heads, probs, g, grads),
            Op::Bce { p, labels, eps } => {
                let n = labels.len() as f64;
                let pv = self.value(*p);
                self.acc(grads, *p, |buf| {
                    for i in 0..buf.len() {
                        let x = pv[i];
                        if x > *eps && x < 1.0 - eps {
                            let y = labels[i];
                            buf[i] += g[0] * (-(y / x) + (1.0 - y) / (1.0 - x)) / n;
                        }
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let d = self.shape(q)[1];
        let (gq, gk, gv) = kernels::attention_backward(
            self.value(q),
            self.value(k),
            self.value(v),
            probs,
            g,
            batch,
            heads,
            d,
        );
        let add_into = |buf: &mut [f64], src: &[f64]| {
            buf.iter_mut().zip(src).for_each(|(b, s)| *b += s);
        };
        self.acc(grads, q, |buf| add_into(buf, &gq));
        self.acc(grads, k, |buf| add_into(buf, &gk));
        self.acc(grads, v, |buf| add_into(buf, &gv));
    }
}
