//! Define-by-run reverse-mode autodiff.
//!
//! A [`Tape`] is rebuilt for every forward pass. Nodes are appended in
//! execution order, so inputs always precede their consumers and
//! [`Tape::backward`] is a single reverse sweep. Parameter leaves borrow the
//! model's buffers instead of copying them.

use std::borrow::Cow;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{self, AttnShape, RopeTable};
use crate::tensor::{gemm, Scalar, Tensor, View, ViewMut};

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Linear { x: Var, w: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    AddRow { a: Var, bias: Var, cols: usize },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: T },
    Silu { a: Var },
    RmsNorm { x: Var, w: Var, d: usize, inv_rms: Vec<T> },
    Softmax { a: Var, cols: usize },
    Embedding { table: Var, ids: Vec<usize>, d: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T>, vocab: usize },
    Sum { a: Var },
    Rope { a: Var, positions: Vec<usize>, n_heads: usize, table: Arc<RopeTable<T>> },
    Attention { q: Var, k: Var, v: Var, shape: AttnShape, probs: Vec<T> },
}

struct Node<'a, T: Scalar> {
    shape: Vec<usize>,
    value: Cow<'a, [T]>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<'a, T: Scalar> Default for Tape<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Cow<'a, [T]>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf borrowing `t`; differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &'a Tensor<T>) -> Var {
        self.param(t, t.requires_grad())
    }

    /// Leaf borrowing `t` with an explicit differentiability flag.
    pub fn param(&mut self, t: &'a Tensor<T>, trainable: bool) -> Var {
        self.push(t.shape().to_vec(), Cow::Borrowed(t.data()), Op::Leaf, trainable)
    }

    /// Owned leaf.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad();
        let shape = t.shape().to_vec();
        self.push(shape, Cow::Owned(t.into_data()), Op::Leaf, rg)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.input(t))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape is consistent")
    }

    /// Gradient of `v` after [`backward`](Self::backward). Differentiable
    /// leaves that were not reachable from the loss report zeros.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn matrix(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        match s.len() {
            2 => Ok((s[0], s[1])),
            _ => Err(Error::Dimension {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            }),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    /// `[m,k] x [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (k2, n) = self.matrix(b, "matmul")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            T::one(),
            View::rm(self.value(a), m, k),
            View::rm(self.value(b), k, n),
            T::zero(),
            ViewMut::rm(&mut out, m, n),
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], Cow::Owned(out), Op::MatMul { a, b, m, k, n }, rg))
    }

    /// `x · wᵀ` with `x: [m,k]` and a weight stored as `[d_out, d_in] = [n,k]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (m, k) = self.matrix(x, "linear")?;
        let (n, k2) = self.matrix(w, "linear")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "linear",
                lhs: vec![m, k],
                rhs: vec![n, k2],
            });
        }
        let mut out = vec![T::zero(); m * n];
        kernels::linear(self.value(x), m, k, self.value(w), n, T::zero(), &mut out);
        let rg = self.rg(&[x, w]);
        Ok(self.push(vec![m, n], Cow::Owned(out), Op::Linear { x, w, m, k, n }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out: Vec<T> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x + *y).collect();
        let rg = self.rg(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, Cow::Owned(out), Op::Add { a, b }, rg))
    }

    /// Adds a `[cols]` vector to every row of `a`; the only broadcast supported.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.matrix(a, "add_row")?;
        if self.shape(bias) != [cols] {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: vec![rows, cols],
                rhs: self.shape(bias).to_vec(),
            });
        }
        let bv = self.value(bias);
        let out: Vec<T> = self
            .value(a)
            .chunks_exact(cols)
            .flat_map(|row| row.iter().zip(bv).map(|(x, b)| *x + *b))
            .collect();
        let rg = self.rg(&[a, bias]);
        Ok(self.push(vec![rows, cols], Cow::Owned(out), Op::AddRow { a, bias, cols }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<T> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x * *y).collect();
        let rg = self.rg(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, Cow::Owned(out), Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out: Vec<T> = self.value(a).iter().map(|x| *x * s).collect();
        let rg = self.rg(&[a]);
        let shape = self.shape(a).to_vec();
        self.push(shape, Cow::Owned(out), Op::Scale { a, s }, rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out: Vec<T> = self.value(a).iter().map(|&x| kernels::silu(x)).collect();
        let rg = self.rg(&[a]);
        let shape = self.shape(a).to_vec();
        self.push(shape, Cow::Owned(out), Op::Silu { a }, rg)
    }

    pub fn rmsnorm(&mut self, x: Var, w: Var, eps: T) -> Result<Var> {
        if !(eps > T::zero()) {
            return Err(Error::Config(format!("rmsnorm eps must be positive, got {eps:?}")));
        }
        let (rows, d) = self.matrix(x, "rmsnorm")?;
        if self.shape(w) != [d] {
            return Err(Error::Dimension {
                op: "rmsnorm",
                lhs: vec![rows, d],
                rhs: self.shape(w).to_vec(),
            });
        }
        let mut out = vec![T::zero(); rows * d];
        let mut inv = vec![T::zero(); rows];
        kernels::rmsnorm_rows(self.value(x), d, self.value(w), eps, &mut out, &mut inv);
        let rg = self.rg(&[x, w]);
        Ok(self.push(vec![rows, d], Cow::Owned(out), Op::RmsNorm { x, w, d, inv_rms: inv }, rg))
    }

    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let cols = *self.shape(a).last().ok_or_else(|| Error::Dimension {
            op: "softmax",
            lhs: vec![],
            rhs: vec![],
        })?;
        let mut out = self.value(a).to_vec();
        if cols > 0 {
            out.chunks_exact_mut(cols).for_each(kernels::softmax_inplace);
        }
        let rg = self.rg(&[a]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, Cow::Owned(out), Op::Softmax { a, cols }, rg))
    }

    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let (vocab, d) = self.matrix(table, "embedding")?;
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        let mut idx = Vec::with_capacity(ids.len());
        for &id in ids {
            let id = id as usize;
            if id >= vocab {
                return Err(Error::Index(format!("token id {id} >= vocab_size {vocab}")));
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
            idx.push(id);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(vec![ids.len(), d], Cow::Owned(out), Op::Embedding { table, ids: idx, d }, rg))
    }

    /// Mean next-token negative log-likelihood over all rows.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32]) -> Result<Var> {
        let (m, vocab) = self.matrix(logits, "cross_entropy")?;
        if targets.len() != m {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: vec![m, vocab],
                rhs: vec![targets.len()],
            });
        }
        if m == 0 {
            return Err(Error::Data("cross_entropy over zero positions".into()));
        }
        let lv = self.value(logits);
        let rg = self.rg(&[logits]);
        let mut probs = if rg { Vec::with_capacity(m * vocab) } else { Vec::new() };
        let mut total = 0.0f64;
        let mut tgt = Vec::with_capacity(m);
        for (row, &t) in lv.chunks_exact(vocab).zip(targets) {
            let t = t as usize;
            if t >= vocab {
                return Err(Error::Index(format!("target id {t} >= vocab_size {vocab}")));
            }
            let lse = kernels::log_sum_exp(row);
            total += (lse - row[t]).as_f64();
            if rg {
                probs.extend(row.iter().map(|&z| (z - lse).exp()));
            }
            tgt.push(t);
        }
        let loss = T::from_f64(total / m as f64);
        Ok(self.push(
            vec![],
            Cow::Owned(vec![loss]),
            Op::CrossEntropy {
                logits,
                targets: tgt,
                probs,
                vocab,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let mut s = T::zero();
        for &v in self.value(a) {
            s += v;
        }
        let rg = self.rg(&[a]);
        self.push(vec![], Cow::Owned(vec![s]), Op::Sum { a }, rg)
    }

    /// Rotary embedding of `[rows, n_heads * head_dim]` with one position per row.
    pub(crate) fn rope(
        &mut self,
        a: Var,
        positions: Vec<usize>,
        n_heads: usize,
        table: Arc<RopeTable<T>>,
    ) -> Result<Var> {
        let (rows, cols) = self.matrix(a, "rope")?;
        if positions.len() != rows || cols % n_heads != 0 {
            return Err(Error::Dimension {
                op: "rope",
                lhs: vec![rows, cols],
                rhs: vec![positions.len(), n_heads],
            });
        }
        if let Some(&p) = positions.iter().max() {
            if p >= table.max_pos() {
                return Err(Error::Length {
                    len: p + 1,
                    max: table.max_pos(),
                });
            }
        }
        let mut out = self.value(a).to_vec();
        for (row, &pos) in out.chunks_exact_mut(cols).zip(&positions) {
            table.rotate_row(row, n_heads, pos, false);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            vec![rows, cols],
            Cow::Owned(out),
            Op::Rope {
                a,
                positions,
                n_heads,
                table,
            },
            rg,
        ))
    }

    pub(crate) fn causal_attention(&mut self, q: Var, k: Var, v: Var, shape: AttnShape) -> Result<Var> {
        let expect = [shape.batch * shape.seq, shape.inner()];
        for x in [q, k, v] {
            if self.shape(x) != expect {
                return Err(Error::Dimension {
                    op: "attention",
                    lhs: self.shape(x).to_vec(),
                    rhs: expect.to_vec(),
                });
            }
        }
        let mut out = vec![T::zero(); expect[0] * expect[1]];
        let mut probs = vec![T::zero(); shape.batch * shape.n_heads * shape.seq * shape.seq];
        kernels::causal_attention(self.value(q), self.value(k), self.value(v), shape, &mut out, &mut probs);
        let rg = self.rg(&[q, k, v]);
        if !rg {
            probs = Vec::new();
        }
        Ok(self.push(expect.to_vec(), Cow::Owned(out), Op::Attention { q, k, v, shape, probs }, rg))
    }

    /// Reverse sweep from a scalar `loss`. Clears any previous gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let n = self.nodes.len();
        self.grads = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            self.grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.backward_node(i, &g);
        }
        for (node, g) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if matches!(node.op, Op::Leaf) && node.requires_grad && g.is_none() {
                *g = Some(vec![T::zero(); node.value.len()]);
            }
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, g: &[T]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| -> &[T] { &nodes[v.0].value };
        fn acc<'g, T: Scalar>(grads: &'g mut [Option<Vec<T>>], v: Var, len: usize) -> &'g mut [T] {
            grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
        }

        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if wants(*a) {
                    let da = acc(grads, *a, m * k);
                    gemm(T::one(), View::rm(g, m, n), View::rm(val(*b), k, n).t(), T::one(), ViewMut::rm(da, m, k));
                }
                if wants(*b) {
                    let db = acc(grads, *b, k * n);
                    gemm(T::one(), View::rm(val(*a), m, k).t(), View::rm(g, m, n), T::one(), ViewMut::rm(db, k, n));
                }
            }
            Op::Linear { x, w, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if wants(*x) {
                    let dx = acc(grads, *x, m * k);
                    gemm(T::one(), View::rm(g, m, n), View::rm(val(*w), n, k), T::one(), ViewMut::rm(dx, m, k));
                }
                if wants(*w) {
                    let dw = acc(grads, *w, n * k);
                    gemm(T::one(), View::rm(g, m, n).t(), View::rm(val(*x), m, k), T::one(), ViewMut::rm(dw, n, k));
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if wants(v) {
                        let d = acc(grads, v, g.len());
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += *g);
                    }
                }
            }
            Op::AddRow { a, bias, cols } => {
                if wants(*a) {
                    let d = acc(grads, *a, g.len());
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += *g);
                }
                if wants(*bias) {
                    let d = acc(grads, *bias, *cols);
                    for row in g.chunks_exact(*cols) {
                        d.iter_mut().zip(row).for_each(|(d, g)| *d += *g);
                    }
                }
            }
            Op::Mul { a, b } => {
                if wants(*a) {
                    let bv = val(*b);
                    let d = acc(grads, *a, g.len());
                    for ((d, g), y) in d.iter_mut().zip(g).zip(bv) {
                        *d += *g * *y;
                    }
                }
                if wants(*b) {
                    let av = val(*a);
                    let d = acc(grads, *b, g.len());
                    for ((d, g), x) in d.iter_mut().zip(g).zip(av) {
                        *d += *g * *x;
                    }
                }
            }
            Op::Scale { a, s } => {
                if wants(*a) {
                    let d = acc(grads, *a, g.len());
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += *g * *s);
                }
            }
            Op::Silu { a } => {
                if wants(*a) {
                    let xv = val(*a);
                    let d = acc(grads, *a, g.len());
                    for ((d, g), &x) in d.iter_mut().zip(g).zip(xv) {
                        let s = kernels::sigmoid(x);
                        *d += *g * s * (T::one() + x * (T::one() - s));
                    }
                }
            }
            Op::RmsNorm { x, w, d, inv_rms } => {
                let d = *d;
                let xv = val(*x);
                let wv = val(*w);
                if wants(*w) {
                    let dw = acc(grads, *w, d);
                    for ((row, grow), &r) in xv.chunks_exact(d).zip(g.chunks_exact(d)).zip(inv_rms) {
                        for j in 0..d {
                            dw[j] += grow[j] * row[j] * r;
                        }
                    }
                }
                if wants(*x) {
                    let dn = T::from_f64(d as f64);
                    let dx = acc(grads, *x, xv.len());
                    for (((row, grow), dxr), &r) in xv
                        .chunks_exact(d)
                        .zip(g.chunks_exact(d))
                        .zip(dx.chunks_exact_mut(d))
                        .zip(inv_rms)
                    {
                        let mut dot = T::zero();
                        for j in 0..d {
                            dot += grow[j] * wv[j] * row[j] * r;
                        }
                        let dot = dot / dn;
                        for j in 0..d {
                            let xhat = row[j] * r;
                            dxr[j] += r * (grow[j] * wv[j] - xhat * dot);
                        }
                    }
                }
            }
            Op::Softmax { a, cols } => {
                if wants(*a) && *cols > 0 {
                    let y = &nodes[i].value;
                    let d = acc(grads, *a, g.len());
                    for ((yr, gr), dr) in y.chunks_exact(*cols).zip(g.chunks_exact(*cols)).zip(d.chunks_exact_mut(*cols)) {
                        let mut dot = T::zero();
                        for j in 0..*cols {
                            dot += yr[j] * gr[j];
                        }
                        for j in 0..*cols {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Embedding { table, ids, d } => {
                if wants(*table) {
                    let len = nodes[table.0].value.len();
                    let dt = acc(grads, *table, len);
                    for (row, &id) in g.chunks_exact(*d).zip(ids) {
                        for (t, v) in dt[id * d..(id + 1) * d].iter_mut().zip(row) {
                            *t += *v;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                vocab,
            } => {
                if wants(*logits) {
                    let m = targets.len();
                    let scale = g[0] / T::from_f64(m as f64);
                    let dl = acc(grads, *logits, m * vocab);
                    for ((dr, pr), &t) in dl.chunks_exact_mut(*vocab).zip(probs.chunks_exact(*vocab)).zip(targets) {
                        for (d, p) in dr.iter_mut().zip(pr) {
                            *d += *p * scale;
                        }
                        dr[t] -= scale;
                    }
                }
            }
            Op::Sum { a } => {
                if wants(*a) {
                    let len = nodes[a.0].value.len();
                    let d = acc(grads, *a, len);
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Rope {
                a,
                positions,
                n_heads,
                table,
            } => {
                if wants(*a) {
                    let cols = g.len() / positions.len().max(1);
                    let mut rotated = g.to_vec();
                    for (row, &pos) in rotated.chunks_exact_mut(cols).zip(positions) {
                        table.rotate_row(row, *n_heads, pos, true);
                    }
                    let d = acc(grads, *a, g.len());
                    d.iter_mut().zip(&rotated).for_each(|(d, r)| *d += *r);
                }
            }
            Op::Attention { q, k, v, shape, probs } => {
                attention_backward(nodes, grads, g, *q, *k, *v, *shape, probs);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Scalar>(
    nodes: &[Node<'_, T>],
    grads: &mut [Option<Vec<T>>],
    g: &[T],
    q: Var,
    k: Var,
    v: Var,
    s: AttnShape,
    probs: &[T],
) {
    let inner = s.inner();
    let t = s.seq;
    let hd = s.head_dim;
    let len = s.batch * t * inner;
    let scale = T::one() / T::from_f64(hd as f64).sqrt();

    if nodes[v.0].requires_grad {
        let dv = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
        for b in 0..s.batch {
            for h in 0..s.n_heads {
                let off = s.head_offset(b, h);
                let p = &probs[s.probs_offset(b, h)..][..t * t];
                let out = ViewMut {
                    data: &mut dv[off..],
                    rows: t,
                    cols: hd,
                    rs: inner,
                    cs: 1,
                };
                gemm(T::one(), View::rm(p, t, t).t(), head_view(g, off, t, hd, inner), T::one(), out);
            }
        }
    }

    let need_q = nodes[q.0].requires_grad;
    let need_k = nodes[k.0].requires_grad;
    if !need_q && !need_k {
        return;
    }
    // dS = P * (dP - rowsum(dP * P)), with dP = dO · Vᵀ.
    let vv = &nodes[v.0].value;
    let mut ds = vec![T::zero(); probs.len()];
    for b in 0..s.batch {
        for h in 0..s.n_heads {
            let off = s.head_offset(b, h);
            let p_off = s.probs_offset(b, h);
            let dsh = &mut ds[p_off..p_off + t * t];
            gemm(T::one(), head_view(g, off, t, hd, inner), head_view(vv, off, t, hd, inner).t(), T::zero(), ViewMut::rm(dsh, t, t));
            let p = &probs[p_off..p_off + t * t];
            for i in 0..t {
                let pr = &p[i * t..(i + 1) * t];
                let dr = &mut dsh[i * t..(i + 1) * t];
                let mut dot = T::zero();
                for j in 0..=i {
                    dot += pr[j] * dr[j];
                }
                for j in 0..t {
                    dr[j] = pr[j] * (dr[j] - dot);
                }
            }
        }
    }
    let qv = &nodes[q.0].value;
    let kv = &nodes[k.0].value;
    if need_q {
        let dq = grads[q.0].get_or_insert_with(|| vec![T::zero(); len]);
        for b in 0..s.batch {
            for h in 0..s.n_heads {
                let off = s.head_offset(b, h);
                let dsh = &ds[s.probs_offset(b, h)..][..t * t];
                let out = ViewMut {
                    data: &mut dq[off..],
                    rows: t,
                    cols: hd,
                    rs: inner,
                    cs: 1,
                };
                gemm(scale, View::rm(dsh, t, t), head_view(kv, off, t, hd, inner), T::one(), out);
            }
        }
    }
    if need_k {
        let dk = grads[k.0].get_or_insert_with(|| vec![T::zero(); len]);
        for b in 0..s.batch {
            for h in 0..s.n_heads {
                let off = s.head_offset(b, h);
                let dsh = &ds[s.probs_offset(b, h)..][..t * t];
                let out = ViewMut {
                    data: &mut dk[off..],
                    rows: t,
                    cols: hd,
                    rs: inner,
                    cs: 1,
                };
                gemm(scale, View::rm(dsh, t, t).t(), head_view(qv, off, t, hd, inner), T::one(), out);
            }
        }
    }
}

/// One head's `[seq, head_dim]` slice inside a `[rows, inner]` buffer.
fn head_view<T: Scalar>(data: &[T], off: usize, t: usize, hd: usize, inner: usize) -> View<'_, T> {
    View {
        data: &data[off..],
        rows: t,
        cols: hd,
        rs: inner,
        cs: 1,
    }
}
