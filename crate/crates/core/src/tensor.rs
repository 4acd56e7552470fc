//! Dense f64 tensors and a tape-based reverse-mode differentiator.
//!
//! A [`Tape`] records every forward op as a node holding its output value.
//! [`Tape::backward`] walks the nodes once in reverse and accumulates
//! gradients into every node that transitively depends on a tracked leaf.
//! Leaves created from a [`Tensor`] with `requires_grad == false` are
//! constants: no gradient is ever computed for them, so frozen parameter
//! groups cannot be updated even by accident.
//!
//! Shapes are rank 0, 1 or 2. Rank-1 tensors behave as a single row where
//! a row-wise op (softmax, normalization) is applied.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn trainable(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn frozen(mut self) -> Self {
        self.requires_grad = false;
        self.grad = None;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        rows_cols(&self.shape).0
    }

    pub fn cols(&self) -> usize {
        rows_cols(&self.shape).1
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Plain SGD update; clears the gradient afterwards.
    pub fn sgd_step(&mut self, lr: f64) {
        if !self.requires_grad {
            return;
        }
        if let Some(g) = self.grad.take() {
            for (w, g) in self.data.iter_mut().zip(g) {
                *w -= lr * g;
            }
        }
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => (
            shape[..shape.len() - 1].iter().product(),
            shape[shape.len() - 1],
        ),
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        n: usize,
        p: usize,
    },
    // a · bᵀ with a: m×n, b: p×n
    MatMulBt {
        a: usize,
        b: usize,
        m: usize,
        n: usize,
        p: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        c: f64,
    },
    AddRow {
        a: usize,
        row: usize,
        cols: usize,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
        dim: usize,
    },
    Softmax {
        a: usize,
        cols: usize,
        temperature: f64,
    },
    Log {
        a: usize,
    },
    Concat {
        parts: Vec<usize>,
    },
    SliceRows {
        a: usize,
        start: usize,
        cols: usize,
    },
    Gather {
        a: usize,
        idx: Vec<usize>,
    },
    Sum {
        a: usize,
    },
    MeanRows {
        a: usize,
        rows: usize,
        cols: usize,
    },
    Reshape {
        a: usize,
    },
    NormalizeRows {
        a: usize,
        cols: usize,
        norms: Vec<f64>,
    },
    CrossEntropy {
        a: usize,
        cols: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    tracked: bool,
}

/// Computation tape. One tape per forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op, tracked: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            value,
            shape,
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: usize) -> bool {
        self.nodes[v].tracked
    }

    /// Records a leaf. Tracked iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.data.clone(), t.shape.clone(), Op::Leaf, t.requires_grad)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.data, t.shape, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        rows_cols(&self.nodes[v.0].shape)
    }

    fn matrix_dims(&self, v: Var, op: &'static str, other: Var) -> Result<(usize, usize)> {
        let shape = &self.nodes[v.0].shape;
        if shape.len() != 2 {
            return Err(Error::Dimension {
                op,
                lhs: shape.clone(),
                rhs: self.nodes[other.0].shape.clone(),
            });
        }
        Ok((shape[0], shape[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "matmul", b)?;
        let (n2, p) = self.matrix_dims(b, "matmul", a)?;
        if n != n2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let out = matmul_raw(self.value(a), self.value(b), m, n, p);
        let tracked = self.tracked(a.0) || self.tracked(b.0);
        Ok(self.push(
            out,
            vec![m, p],
            Op::MatMul {
                a: a.0,
                b: b.0,
                m,
                n,
                p,
            },
            tracked,
        ))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "matmul_bt", b)?;
        let (p, n2) = self.matrix_dims(b, "matmul_bt", a)?;
        if n != n2 {
            return Err(self.mismatch("matmul_bt", a, b));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * p];
        for i in 0..m {
            let ar = &av[i * n..(i + 1) * n];
            for j in 0..p {
                out[i * p + j] = dot(ar, &bv[j * n..(j + 1) * n]);
            }
        }
        let tracked = self.tracked(a.0) || self.tracked(b.0);
        Ok(self.push(
            out,
            vec![m, p],
            Op::MatMulBt {
                a: a.0,
                b: b.0,
                m,
                n,
                p,
            },
            tracked,
        ))
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Dimension {
            op,
            lhs: self.nodes[a.0].shape.clone(),
            rhs: self.nodes[b.0].shape.clone(),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(self.mismatch(op, a, b));
        }
        Ok(())
    }

    fn elementwise(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: fn(f64, f64) -> f64,
    ) -> Result<(Vec<f64>, Vec<usize>, bool)> {
        self.same_shape(name, a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((
            out,
            self.nodes[a.0].shape.clone(),
            self.tracked(a.0) || self.tracked(b.0),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, shape, tracked) = self.elementwise(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, shape, Op::Add { a: a.0, b: b.0 }, tracked))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, shape, tracked) = self.elementwise(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, shape, Op::Sub { a: a.0, b: b.0 }, tracked))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, shape, tracked) = self.elementwise(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, shape, Op::Mul { a: a.0, b: b.0 }, tracked))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let tracked = self.tracked(a.0);
        self.push(out, shape, Op::Scale { a: a.0, c }, tracked)
    }

    /// Adds a length-`cols` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, cols) = self.dims(a);
        if self.value(row).len() != cols {
            return Err(self.mismatch("add_row", a, row));
        }
        let r = self.value(row).to_vec();
        let out = self
            .value(a)
            .chunks(cols)
            .flat_map(|chunk| chunk.iter().zip(&r).map(|(x, y)| x + y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let tracked = self.tracked(a.0) || self.tracked(row.0);
        Ok(self.push(
            out,
            shape,
            Op::AddRow {
                a: a.0,
                row: row.0,
                cols,
            },
            tracked,
        ))
    }

    /// Row lookup into a `[vocab × dim]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, dim) = self.matrix_dims(table, "embedding", table)?;
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index {
                    what: "embedding id",
                    index: id,
                    size: rows,
                });
            }
            out.extend_from_slice(&tv[id * dim..(id + 1) * dim]);
        }
        let tracked = self.tracked(table.0);
        Ok(self.push(
            out,
            vec![ids.len(), dim],
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
                dim,
            },
            tracked,
        ))
    }

    /// Row-wise `softmax(x / temperature)`. Entries where `mask` is false get
    /// probability exactly zero.
    pub fn softmax(&mut self, a: Var, temperature: f64, mask: Option<&[bool]>) -> Result<Var> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::Parameter(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let (rows, cols) = self.dims(a);
        if let Some(m) = mask {
            if m.len() != rows * cols {
                return Err(Error::Dimension {
                    op: "softmax mask",
                    lhs: self.nodes[a.0].shape.clone(),
                    rhs: vec![m.len()],
                });
            }
        }
        let x = self.value(a);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let allowed = |c: usize| mask.is_none_or(|m| m[r * cols + c]);
            let row = &x[r * cols..(r + 1) * cols];
            let max = (0..cols)
                .filter(|&c| allowed(c))
                .map(|c| row[c])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::Contract(format!("softmax row {r} fully masked")));
            }
            let mut z = 0.0;
            for c in 0..cols {
                if allowed(c) {
                    let e = ((row[c] - max) / temperature).exp();
                    out[r * cols + c] = e;
                    z += e;
                }
            }
            for v in &mut out[r * cols..(r + 1) * cols] {
                *v /= z;
            }
        }
        let shape = self.nodes[a.0].shape.clone();
        let tracked = self.tracked(a.0);
        Ok(self.push(
            out,
            shape,
            Op::Softmax {
                a: a.0,
                cols,
                temperature,
            },
            tracked,
        ))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.value(a).iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::NumericDomain(format!(
                "log of non-positive value {bad}"
            )));
        }
        let out = self.value(a).iter().map(|v| v.ln()).collect();
        let shape = self.nodes[a.0].shape.clone();
        let tracked = self.tracked(a.0);
        Ok(self.push(out, shape, Op::Log { a: a.0 }, tracked))
    }

    /// Stacks tensors with equal column count along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat of zero tensors".into()));
        };
        let cols = self.dims(first).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != cols {
                return Err(self.mismatch("concat_rows", first, p));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        let tracked = parts.iter().any(|p| self.tracked(p.0));
        Ok(self.push(
            out,
            vec![rows, cols],
            Op::Concat {
                parts: parts.iter().map(|p| p.0).collect(),
            },
            tracked,
        ))
    }

    /// Rows `[start, end)` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.dims(a);
        if start >= end || end > rows {
            return Err(Error::Index {
                what: "slice end",
                index: end,
                size: rows,
            });
        }
        let out = self.value(a)[start * cols..end * cols].to_vec();
        let tracked = self.tracked(a.0);
        Ok(self.push(
            out,
            vec![end - start, cols],
            Op::SliceRows {
                a: a.0,
                start,
                cols,
            },
            tracked,
        ))
    }

    /// Picks flat-indexed elements into a rank-1 tensor.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let n = self.value(a).len();
        let mut out = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= n {
                return Err(Error::Index {
                    what: "gather",
                    index: i,
                    size: n,
                });
            }
            out.push(self.value(a)[i]);
        }
        let tracked = self.tracked(a.0);
        Ok(self.push(
            out,
            vec![idx.len()],
            Op::Gather {
                a: a.0,
                idx: idx.to_vec(),
            },
            tracked,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let tracked = self.tracked(a.0);
        self.push(vec![s], vec![], Op::Sum { a: a.0 }, tracked)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column means: `[r × c] → [1 × c]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (rows, cols) = self.dims(a);
        let mut out = vec![0.0; cols];
        for chunk in self.value(a).chunks(cols) {
            for (o, v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= rows as f64;
        }
        let tracked = self.tracked(a.0);
        self.push(
            out,
            vec![1, cols],
            Op::MeanRows { a: a.0, rows, cols },
            tracked,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: shape,
            });
        }
        let out = self.value(a).to_vec();
        let tracked = self.tracked(a.0);
        Ok(self.push(out, shape, Op::Reshape { a: a.0 }, tracked))
    }

    /// L2-normalizes every row. Zero rows are a domain error.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (_, cols) = self.dims(a);
        let mut out = self.value(a).to_vec();
        let mut norms = Vec::new();
        for (r, chunk) in out.chunks_mut(cols).enumerate() {
            let norm = dot(chunk, chunk).sqrt();
            if !(norm > 0.0) {
                return Err(Error::NumericDomain(format!(
                    "cannot normalize zero row {r}"
                )));
            }
            chunk.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let shape = self.nodes[a.0].shape.clone();
        let tracked = self.tracked(a.0);
        Ok(self.push(
            out,
            shape,
            Op::NormalizeRows {
                a: a.0,
                cols,
                norms,
            },
            tracked,
        ))
    }

    /// Summed negative log-likelihood of `targets[i]` under `softmax(row i)`.
    /// A rank-1 `[V]` input with one target is the single-distribution case.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims(logits);
        if targets.len() != rows {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: self.nodes[logits.0].shape.clone(),
                rhs: vec![targets.len()],
            });
        }
        let x = self.value(logits);
        let mut probs = vec![0.0; rows * cols];
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= cols {
                return Err(Error::Index {
                    what: "target token",
                    index: t,
                    size: cols,
                });
            }
            let row = &x[r * cols..(r + 1) * cols];
            let lse = log_sum_exp(row);
            loss += lse - row[t];
            for c in 0..cols {
                probs[r * cols + c] = (row[c] - lse).exp();
            }
        }
        let tracked = self.tracked(logits.0);
        Ok(self.push(
            vec![loss],
            vec![],
            Op::CrossEntropy {
                a: logits.0,
                cols,
                targets: targets.to_vec(),
                probs,
            },
            tracked,
        ))
    }

    /// Single-head scaled dot-product attention, `softmax(q kᵀ / √d) v`.
    /// `mask` is `[q_rows × k_rows]`, true where attending is allowed.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: Option<&[bool]>) -> Result<Var> {
        let d = self.dims(q).1 as f64;
        let scores = self.matmul_bt(q, k)?;
        let weights = self.softmax(scores, d.sqrt(), mask)?;
        self.matmul(weights, v)
    }

    /// Reverse pass from a scalar. Gradients land on every tracked node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].tracked {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last backward pass w.r.t. `v`, if `v` is tracked and
    /// reachable from the loss.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |target: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[target].tracked {
                return;
            }
            let buf = grads[target].get_or_insert_with(|| vec![0.0; nodes[target].value.len()]);
            f(buf);
        };
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, n, p } => {
                let (av, bv) = (&nodes[a].value, &nodes[b].value);
                acc(a, &mut |da| {
                    for r in 0..m {
                        for c in 0..n {
                            let mut s = 0.0;
                            for j in 0..p {
                                s += g[r * p + j] * bv[c * p + j];
                            }
                            da[r * n + c] += s;
                        }
                    }
                });
                acc(b, &mut |db| {
                    for r in 0..m {
                        for c in 0..n {
                            let x = av[r * n + c];
                            if x == 0.0 {
                                continue;
                            }
                            for j in 0..p {
                                db[c * p + j] += x * g[r * p + j];
                            }
                        }
                    }
                });
            }
            &Op::MatMulBt { a, b, m, n, p } => {
                let (av, bv) = (&nodes[a].value, &nodes[b].value);
                acc(a, &mut |da| {
                    for r in 0..m {
                        for j in 0..p {
                            let gv = g[r * p + j];
                            for c in 0..n {
                                da[r * n + c] += gv * bv[j * n + c];
                            }
                        }
                    }
                });
                acc(b, &mut |db| {
                    for r in 0..m {
                        for j in 0..p {
                            let gv = g[r * p + j];
                            for c in 0..n {
                                db[j * n + c] += gv * av[r * n + c];
                            }
                        }
                    }
                });
            }
            &Op::Add { a, b } => {
                acc(a, &mut |da| add_into(da, g));
                acc(b, &mut |db| add_into(db, g));
            }
            &Op::Sub { a, b } => {
                acc(a, &mut |da| add_into(da, g));
                acc(b, &mut |db| db.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (&nodes[a].value, &nodes[b].value);
                acc(a, &mut |da| {
                    for ((d, g), y) in da.iter_mut().zip(g).zip(bv) {
                        *d += g * y;
                    }
                });
                acc(b, &mut |db| {
                    for ((d, g), x) in db.iter_mut().zip(g).zip(av) {
                        *d += g * x;
                    }
                });
            }
            &Op::Scale { a, c } => acc(a, &mut |da| {
                da.iter_mut().zip(g).for_each(|(d, g)| *d += c * g)
            }),
            &Op::AddRow { a, row, cols } => {
                acc(a, &mut |da| add_into(da, g));
                acc(row, &mut |dr| {
                    for chunk in g.chunks(cols) {
                        add_into(dr, chunk);
                    }
                });
            }
            Op::Embedding { table, ids, dim } => {
                let dim = *dim;
                acc(*table, &mut |dt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(
                            &mut dt[id * dim..(id + 1) * dim],
                            &g[r * dim..(r + 1) * dim],
                        );
                    }
                });
            }
            &Op::Softmax {
                a,
                cols,
                temperature,
            } => {
                let y = &nodes[i].value;
                acc(a, &mut |da| {
                    for ((dr, yr), gr) in
                        da.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols))
                    {
                        let inner = dot(yr, gr);
                        for c in 0..cols {
                            dr[c] += yr[c] * (gr[c] - inner) / temperature;
                        }
                    }
                });
            }
            &Op::Log { a } => {
                let x = &nodes[a].value;
                acc(a, &mut |da| {
                    for ((d, g), x) in da.iter_mut().zip(g).zip(x) {
                        *d += g / x;
                    }
                });
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p].value.len();
                    acc(p, &mut |dp| add_into(dp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            &Op::SliceRows { a, start, cols } => {
                acc(a, &mut |da| {
                    add_into(&mut da[start * cols..start * cols + g.len()], g)
                });
            }
            Op::Gather { a, idx } => {
                acc(*a, &mut |da| {
                    for (&j, gv) in idx.iter().zip(g) {
                        da[j] += gv;
                    }
                });
            }
            &Op::Sum { a } => acc(a, &mut |da| da.iter_mut().for_each(|d| *d += g[0])),
            &Op::MeanRows { a, rows, cols } => {
                acc(a, &mut |da| {
                    for chunk in da.chunks_mut(cols) {
                        for (d, gv) in chunk.iter_mut().zip(g) {
                            *d += gv / rows as f64;
                        }
                    }
                });
            }
            &Op::Reshape { a } => acc(a, &mut |da| add_into(da, g)),
            Op::NormalizeRows { a, cols, norms } => {
                let cols = *cols;
                let y = &nodes[i].value;
                acc(*a, &mut |da| {
                    for (r, norm) in norms.iter().enumerate() {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let inner = dot(yr, gr);
                        for c in 0..cols {
                            da[r * cols + c] += (gr[c] - yr[c] * inner) / norm;
                        }
                    }
                });
            }
            Op::CrossEntropy {
                a,
                cols,
                targets,
                probs,
            } => {
                let cols = *cols;
                acc(*a, &mut |da| {
                    for (r, &t) in targets.iter().enumerate() {
                        for c in 0..cols {
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            da[r * cols + c] += g[0] * (probs[r * cols + c] - onehot);
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, n: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        let orow = &mut out[i * p..(i + 1) * p];
        for k in 0..n {
            let x = a[i * n + k];
            if x == 0.0 {
                continue;
            }
            for (o, y) in orow.iter_mut().zip(&b[k * p..(k + 1) * p]) {
                *o += x * y;
            }
        }
    }
    out
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Numerically stable `softmax(x / temperature)` on plain values.
pub fn softmax(x: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Parameter(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    if x.is_empty() {
        return Err(Error::Parameter("softmax of empty vector".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericDomain("softmax input not finite".into()));
    }
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| ((v - max) / temperature).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / z).collect())
}

/// Single-distribution negative log-likelihood, `−log softmax(logits)[target]`.
pub fn cross_entropy_nll(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::Index {
            what: "target token",
            index: target,
            size: logits.len(),
        });
    }
    Ok(log_sum_exp(logits) - logits[target])
}
