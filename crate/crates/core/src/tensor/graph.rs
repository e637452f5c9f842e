use rand::Rng;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Additive surrogate for `-inf` on masked logit positions.
pub const MASKED_LOGIT: f64 = -1e9;

const LN_EPS: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive catalogue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Primitive {
    Leaf,
    MatMul,
    Transpose,
    Add,
    AddRow,
    Mul,
    Scale,
    Gelu,
    Relu,
    Tanh,
    Softmax,
    LayerNorm,
    Embedding,
    Dropout,
    ConcatCols,
    SliceCols,
    GatherRows,
    CrossEntropy,
    Sum,
}

impl Primitive {
    pub fn name(self) -> &'static str {
        match self {
            Primitive::Leaf => "leaf",
            Primitive::MatMul => "matmul",
            Primitive::Transpose => "transpose",
            Primitive::Add => "add",
            Primitive::AddRow => "add_row",
            Primitive::Mul => "mul",
            Primitive::Scale => "scale",
            Primitive::Gelu => "gelu",
            Primitive::Relu => "relu",
            Primitive::Tanh => "tanh",
            Primitive::Softmax => "softmax",
            Primitive::LayerNorm => "layer_norm",
            Primitive::Embedding => "embedding",
            Primitive::Dropout => "dropout",
            Primitive::ConcatCols => "concat_cols",
            Primitive::SliceCols => "slice_cols",
            Primitive::GatherRows => "gather_rows",
            Primitive::CrossEntropy => "cross_entropy",
            Primitive::Sum => "sum",
        }
    }
}

/// Public view of one recorded primitive application.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TapeRecord {
    pub primitive: Primitive,
    pub inputs: Vec<Var>,
    pub output: Var,
}

enum Op<T> {
    Leaf,
    /// Output of a primitive none of whose inputs needs a gradient.
    Constant,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Relu(Var),
    Tanh(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
    },
    Sum(Var),
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Constant => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Transpose(x)
            | Op::Scale(x, _)
            | Op::Gelu(x)
            | Op::Relu(x)
            | Op::Tanh(x)
            | Op::Softmax(x)
            | Op::Sum(x) => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Embedding { table, .. } => vec![*table],
            Op::Dropout { x, .. } | Op::SliceCols { x, .. } | Op::GatherRows { x, .. } => vec![*x],
            Op::ConcatCols(xs) => xs.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    primitive: Primitive,
    op: Op<T>,
    requires_grad: bool,
}

/// Forward values plus the tape of primitive applications that produced them.
///
/// Nodes are appended in evaluation order, so the tape is topologically
/// sorted by construction.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// `c (+)= a @ b` where `a` is logically `[m,k]` and `b` is `[k,n]`; the
/// `*_t` flags say the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Real>(m: usize, k: usize, n: usize, a: &[T], a_t: bool, b: &[T], b_t: bool, accumulate: bool, c: &mut [T]) {
    if m == 0 || n == 0 {
        return;
    }
    let sa = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let sb = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    T::gemm(m, k, n, a, sa, b, sb, beta, c);
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            primitive: Primitive::Leaf,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, primitive: Primitive, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Constant };
        self.nodes.push(Node {
            value,
            primitive,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records in evaluation order; constants and leaves are not recorded.
    pub fn records(&self) -> Vec<TapeRecord> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.requires_grad && !matches!(n.op, Op::Leaf))
            .map(|(i, n)| TapeRecord {
                primitive: n.primitive,
                inputs: n.op.inputs(),
                output: Var(i),
            })
            .collect()
    }

    fn matrix(&self, prim: Primitive, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::shape(prim.name(), format!("expected a matrix, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(Primitive::MatMul, a)?;
        let (k2, n) = self.matrix(Primitive::MatMul, b)?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            false,
            &mut out,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Primitive::MatMul, value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix(Primitive::Transpose, x)?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(Primitive::Transpose, value, Op::Transpose(x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "add",
                format!("{:?} + {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(Primitive::Add, value, Op::Add(a, b)))
    }

    /// Broadcast-add a vector of length `cols` to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(row).numel() != cols {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + row {:?}", self.shape(x), self.shape(row)),
            ));
        }
        let r = self.value(row).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + r[i % cols])
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(Primitive::AddRow, value, Op::AddRow(x, row)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "mul",
                format!("{:?} * {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(Primitive::Mul, value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let src = self.value(x);
        let value = Tensor {
            shape: src.shape().to_vec(),
            data: src.data().iter().map(|&v| v * c).collect(),
        };
        self.push(Primitive::Scale, value, Op::Scale(x, c))
    }

    fn map(&mut self, x: Var, prim: Primitive, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let src = self.value(x);
        let value = Tensor {
            shape: src.shape().to_vec(),
            data: src.data().iter().map(|&v| f(v)).collect(),
        };
        self.push(prim, value, op)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let c = T::of(GELU_C);
        let a = T::of(GELU_A);
        let half = T::of(0.5);
        self.map(
            x,
            Primitive::Gelu,
            |v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()),
            Op::Gelu(x),
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Primitive::Relu, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, Primitive::Tanh, |v| v.tanh(), Op::Tanh(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let cols = src.cols();
        let mut data = src.data().to_vec();
        for row in data.chunks_mut(cols.max(1)) {
            softmax_in_place(row);
        }
        let value = Tensor {
            shape: src.shape().to_vec(),
            data,
        };
        self.push(Primitive::Softmax, value, Op::Softmax(x))
    }

    /// Layer normalization over the last axis followed by `gain * x + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(gain).numel() != cols || self.value(bias).numel() != cols {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "input {:?}, gain {:?}, bias {:?}",
                    self.shape(x),
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let src = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = src.rows();
        let n = T::of(cols as f64);
        let eps = T::of(LN_EPS);
        let mut xhat = vec![T::zero(); src.numel()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.numel()];
        for r in 0..rows {
            let row = src.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..cols {
                let h = (row[c] - mean) * inv;
                xhat[r * cols + c] = h;
                out[r * cols + c] = g[c] * h + b[c];
            }
        }
        let value = Tensor::new(src.shape().to_vec(), out)?;
        Ok(self.push(
            Primitive::LayerNorm,
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Row lookup into a `[vocab, dim]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, dim) = self.matrix(Primitive::Embedding, table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::shape(
                "embedding",
                format!("id {bad} out of range for table {:?}", self.shape(table)),
            ));
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            out.extend_from_slice(src.row(i));
        }
        let value = Tensor::new(vec![ids.len(), dim], out)?;
        Ok(self.push(
            Primitive::Embedding,
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Inverted dropout with an explicit mask (entries are `0` or `1/(1-p)`).
    pub fn dropout_with_mask(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        if mask.len() != self.value(x).numel() {
            return Err(Error::shape(
                "dropout",
                format!("mask of {} for input {:?}", mask.len(), self.shape(x)),
            ));
        }
        let src = self.value(x);
        let value = Tensor {
            shape: src.shape().to_vec(),
            data: src.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect(),
        };
        Ok(self.push(Primitive::Dropout, value, Op::Dropout { x, mask }))
    }

    /// Inverted dropout with a mask drawn from `rng`. `p == 0` is the identity.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(Error::Invalid(format!("dropout probability {p} must be < 1")));
        }
        let keep = T::of(1.0 / (1.0 - p));
        let mask = (0..self.value(x).numel())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        self.dropout_with_mask(x, mask)
    }

    /// Concatenate matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::shape("concat_cols", "no inputs"));
        };
        let (rows, _) = self.matrix(Primitive::ConcatCols, first)?;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (r, c) = self.matrix(Primitive::ConcatCols, x)?;
            if r != rows {
                let shapes: Vec<_> = xs.iter().map(|&v| self.shape(v).to_vec()).collect();
                return Err(Error::shape("concat_cols", format!("row mismatch in {shapes:?}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &x in xs {
                out.extend_from_slice(self.value(x).row(r));
            }
        }
        let value = Tensor::new(vec![rows, total], out)?;
        Ok(self.push(Primitive::ConcatCols, value, Op::ConcatCols(xs.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.matrix(Primitive::SliceCols, x)?;
        if start + len > cols {
            return Err(Error::shape(
                "slice_cols",
                format!("[{start}, {}) out of {:?}", start + len, self.shape(x)),
            ));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src.row(r)[start..start + len]);
        }
        let value = Tensor::new(vec![rows, len], out)?;
        Ok(self.push(Primitive::SliceCols, value, Op::SliceCols { x, start }))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.matrix(Primitive::GatherRows, x)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(
                "gather_rows",
                format!("row {bad} out of {:?}", self.shape(x)),
            ));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(src.row(i));
        }
        let value = Tensor::new(vec![idx.len(), cols], out)?;
        Ok(self.push(Primitive::GatherRows, value, Op::GatherRows { x, idx: idx.to_vec() }))
    }

    /// Summed cross-entropy over rows of `logits`; rows whose target is
    /// `None` are masked out and contribute nothing.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let src = self.value(logits);
        let (rows, cols) = (src.rows(), src.cols());
        if targets.len() != rows {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for logits {:?}", targets.len(), src.shape()),
            ));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= cols) {
            return Err(Error::shape(
                "cross_entropy",
                format!("target {bad} for logits {:?}", src.shape()),
            ));
        }
        let mut probs = src.data().to_vec();
        let mut loss = T::zero();
        for (r, target) in targets.iter().enumerate() {
            let row = &mut probs[r * cols..(r + 1) * cols];
            let logits_row = src.row(r);
            let max = logits_row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + logits_row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            if let Some(t) = target {
                loss += lse - logits_row[*t];
            }
            softmax_in_place(row);
        }
        let value = Tensor::scalar(loss);
        Ok(self.push(
            Primitive::CrossEntropy,
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum::<T>();
        self.push(Primitive::Sum, Tensor::scalar(total), Op::Sum(x))
    }

    /// Sum of several scalars.
    pub fn add_all(&mut self, xs: &[Var]) -> Result<Var> {
        let mut iter = xs.iter();
        let Some(&first) = iter.next() else {
            return Err(Error::shape("add", "no terms"));
        };
        let mut acc = first;
        for &x in iter {
            acc = self.add(acc, x)?;
        }
        Ok(acc)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if root.requires_grad {
            grads[loss.0] = Some(Tensor::full(root.value.shape(), T::one()));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.data.iter_mut().zip(delta.data) {
                    *e += d;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let like = |v: Var, data: Vec<T>| Tensor {
            shape: self.shape(v).to_vec(),
            data,
        };
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.requires_grad(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(m, n, k, g.data(), false, self.value(*b).data(), true, false, &mut da);
                    self.accumulate(grads, *a, like(*a, da));
                }
                if self.requires_grad(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(k, m, n, self.value(*a).data(), true, g.data(), false, false, &mut db);
                    self.accumulate(grads, *b, like(*b, db));
                }
            }
            Op::Transpose(x) => {
                let (m, n) = (self.shape(*x)[0], self.shape(*x)[1]);
                let mut dx = vec![T::zero(); m * n];
                for i in 0..m {
                    for j in 0..n {
                        dx[i * n + j] = g.data()[j * m + i];
                    }
                }
                self.accumulate(grads, *x, like(*x, dx));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, g.clone());
                if self.requires_grad(*row) {
                    let cols = g.cols();
                    let mut dr = vec![T::zero(); cols];
                    for (i, &v) in g.data().iter().enumerate() {
                        dr[i % cols] += v;
                    }
                    self.accumulate(grads, *row, like(*row, dr));
                }
            }
            Op::Mul(a, b) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                if self.requires_grad(*a) {
                    let da = g.data().iter().zip(vb).map(|(&d, &y)| d * y).collect();
                    self.accumulate(grads, *a, like(*a, da));
                }
                if self.requires_grad(*b) {
                    let db = g.data().iter().zip(va).map(|(&d, &x)| d * x).collect();
                    self.accumulate(grads, *b, like(*b, db));
                }
            }
            Op::Scale(x, c) => {
                let dx = g.data().iter().map(|&d| d * *c).collect();
                self.accumulate(grads, *x, like(*x, dx));
            }
            Op::Gelu(x) => {
                let c = T::of(GELU_C);
                let a = T::of(GELU_A);
                let half = T::of(0.5);
                let three = T::of(3.0);
                let dx = g
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&d, &v)| {
                        let t = (c * (v + a * v * v * v)).tanh();
                        let du = c * (T::one() + three * a * v * v);
                        d * (half * (T::one() + t) + half * v * (T::one() - t * t) * du)
                    })
                    .collect();
                self.accumulate(grads, *x, like(*x, dx));
            }
            Op::Relu(x) => {
                let dx = g
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, like(*x, dx));
            }
            Op::Tanh(x) => {
                let dx = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(&d, &y)| d * (T::one() - y * y))
                    .collect();
                self.accumulate(grads, *x, like(*x, dx));
            }
            Op::Softmax(x) => {
                let cols = node.value.cols().max(1);
                let mut dx = vec![T::zero(); g.numel()];
                for ((dy, y), out) in g
                    .data()
                    .chunks(cols)
                    .zip(node.value.data().chunks(cols))
                    .zip(dx.chunks_mut(cols))
                {
                    let dot = dy.iter().zip(y).map(|(&a, &b)| a * b).sum::<T>();
                    for ((o, &d), &p) in out.iter_mut().zip(dy).zip(y) {
                        *o = p * (d - dot);
                    }
                }
                self.accumulate(grads, *x, like(*x, dx));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let cols = g.cols();
                let n = T::of(cols as f64);
                let gv = self.value(*gain).data();
                let mut dgain = vec![T::zero(); cols];
                let mut dbias = vec![T::zero(); cols];
                let mut dx = vec![T::zero(); g.numel()];
                for (r, &inv) in inv_std.iter().enumerate() {
                    let dy = &g.data()[r * cols..(r + 1) * cols];
                    let h = &xhat[r * cols..(r + 1) * cols];
                    let mut mean_dh = T::zero();
                    let mut mean_dh_h = T::zero();
                    for c in 0..cols {
                        dgain[c] += dy[c] * h[c];
                        dbias[c] += dy[c];
                        let dh = dy[c] * gv[c];
                        mean_dh += dh;
                        mean_dh_h += dh * h[c];
                    }
                    mean_dh = mean_dh / n;
                    mean_dh_h = mean_dh_h / n;
                    for c in 0..cols {
                        let dh = dy[c] * gv[c];
                        dx[r * cols + c] = inv * (dh - mean_dh - h[c] * mean_dh_h);
                    }
                }
                self.accumulate(grads, *x, like(*x, dx));
                self.accumulate(grads, *gain, like(*gain, dgain));
                self.accumulate(grads, *bias, like(*bias, dbias));
            }
            Op::Embedding { table, ids } => {
                let dim = self.shape(*table)[1];
                let mut dt = vec![T::zero(); self.value(*table).numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..dim {
                        dt[id * dim + c] += g.data()[r * dim + c];
                    }
                }
                self.accumulate(grads, *table, like(*table, dt));
            }
            Op::Dropout { x, mask } => {
                let dx = g.data().iter().zip(mask).map(|(&d, &m)| d * m).collect();
                self.accumulate(grads, *x, like(*x, dx));
            }
            Op::ConcatCols(xs) => {
                let rows = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for &x in xs {
                    let w = self.shape(x)[1];
                    if self.requires_grad(x) {
                        let mut dx = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dx.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(grads, x, like(x, dx));
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (rows, cols) = (self.shape(*x)[0], self.shape(*x)[1]);
                let w = g.cols();
                let mut dx = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    dx[r * cols + start..r * cols + start + w].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *x, like(*x, dx));
            }
            Op::GatherRows { x, idx } => {
                let cols = self.shape(*x)[1];
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..cols {
                        dx[i * cols + c] += g.data()[r * cols + c];
                    }
                }
                self.accumulate(grads, *x, like(*x, dx));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let cols = self.value(*logits).cols();
                let scale = g.item();
                let mut dx = vec![T::zero(); probs.len()];
                for (r, target) in targets.iter().enumerate() {
                    if let Some(t) = target {
                        for c in 0..cols {
                            dx[r * cols + c] = scale * probs[r * cols + c];
                        }
                        dx[r * cols + t] -= scale;
                    }
                }
                self.accumulate(grads, *logits, like(*logits, dx));
            }
            Op::Sum(x) => {
                let dx = vec![g.item(); self.value(*x).numel()];
                self.accumulate(grads, *x, like(*x, dx));
            }
        }
        Ok(())
    }
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

/// Gradients of a scalar with respect to every trainable leaf.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a trainable leaf; `None` for constants and intermediates.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[0.0, 0.0]));
        let y = g.softmax(x);
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::<f64>::new();
        let a = Tensor::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], &[7.0, 8.0, 9.5]]).unwrap();
        let i = g.constant(Tensor::identity(3));
        let av = g.constant(a.clone());
        let y = g.matmul(i, av).unwrap();
        assert_eq!(g.value(y), &a);
    }

    #[test]
    fn cross_entropy_closed_form() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_rows(&[&[2.0, 0.0]]).unwrap());
        let l = g.cross_entropy(x, &[Some(0)]).unwrap();
        let expected = -((2f64).exp() / ((2f64).exp() + 1.0)).ln();
        assert!(close(g.value(l).item(), expected, 1e-15));
        assert!(close(expected, 0.126_928_011_042_973, 1e-12));
    }

    #[test]
    fn quadratic_gradient() {
        let mut g = Graph::<f64>::new();
        let w = g.param(Tensor::from_f64(&[1.0, 2.0]));
        let ww = g.mul(w, w).unwrap();
        let l = g.sum(ww);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.wrt(w).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn softmax_ce_gradient_is_probs_minus_one_hot() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_rows(&[&[0.3, -1.2, 2.0]]).unwrap());
        let l = g.cross_entropy(x, &[Some(1)]).unwrap();
        let grads = g.backward(l).unwrap();
        let logits = [0.3f64, -1.2, 2.0];
        let z: f64 = logits.iter().map(|v| v.exp()).sum();
        for (c, d) in grads.wrt(x).unwrap().data().iter().enumerate() {
            let p = logits[c].exp() / z;
            let expected = p - if c == 1 { 1.0 } else { 0.0 };
            assert!(close(*d, expected, 1e-12));
        }
    }

    #[test]
    fn unused_parameter_gets_exact_zero() {
        let mut g = Graph::<f64>::new();
        let used = g.param(Tensor::from_f64(&[3.0]));
        let unused = g.param(Tensor::from_f64(&[5.0, 6.0]));
        let l = g.sum(used);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.wrt(unused).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let w = g.param(Tensor::from_f64(&[1.0, 2.0]));
        let y = g.scale(w, 2.0);
        assert!(matches!(g.backward(y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_mismatch_names_primitive() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn tape_is_topologically_ordered() {
        let mut g = Graph::<f64>::new();
        let w = g.param(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
        let c = g.constant(Tensor::from_rows(&[&[1.0, 0.0]]).unwrap());
        let h = g.matmul(c, w).unwrap();
        let t = g.tanh(h);
        let s = g.sum(t);
        let records = g.records();
        assert_eq!(records.len(), 3);
        for r in &records {
            assert!(r.inputs.iter().all(|i| i.index() < r.output.index()));
        }
        assert_eq!(records.last().unwrap().output, s);
    }

    #[test]
    fn constant_only_ops_are_not_recorded() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::from_f64(&[1.0, 2.0]));
        let s = g.softmax(c);
        assert!(!g.requires_grad(s));
        assert!(g.records().is_empty());
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::<f32>::new();
        let data: Vec<f64> = (0..4 * 16).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let x = g.constant(Tensor::new(vec![4, 16], data.iter().map(|&v| v as f32).collect()).unwrap());
        let gain = g.constant(Tensor::full(&[16], 1.0));
        let bias = g.constant(Tensor::zeros(&[16]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        for r in 0..4 {
            let row: Vec<f64> = g.value(y).row(r).iter().map(|&v| v as f64).collect();
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-5, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn dropout_zero_probability_is_identity() {
        let mut g = Graph::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = g.param(Tensor::from_f64(&[1.0, 2.0]));
        assert_eq!(g.dropout(x, 0.0, &mut rng).unwrap(), x);
    }

    #[test]
    fn dropout_is_inverted() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64(&[1.0, 2.0, 3.0, 4.0]));
        let y = g.dropout_with_mask(x, vec![0.0, 2.0, 2.0, 0.0]).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 4.0, 6.0, 0.0]);
    }
}
