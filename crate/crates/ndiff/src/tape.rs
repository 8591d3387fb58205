//! Explicit computation tape.
//!
//! A [`Tape`] borrows a [`ParamStore`] and records every operation applied
//! to its [`Var`]s. Parameter nodes read their value straight from the
//! store, so building a tape never copies weights. [`Tape::backward`] walks
//! the recorded nodes in reverse and accumulates into a [`Grads`].
//!
//! Tapes are cheap and single-use: build one per example, run backward,
//! drop it.

use rand::Rng;

use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc};
use crate::{Grads, NdiffError, ParamId, ParamStore, Tensor};

/// Probability clamp used by [`Tape::bce`].
pub const BCE_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Param(ParamId),
    Const,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Sum(Var),
    SumRows(Var),
    DivScalar(Var, f64),
    AddScalar(Var),
    Scale(Var, Var),
    Div(Var, Var),
    Concat(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    Transpose(Var),
    Embedding(ParamId, Vec<usize>),
    Dropout(Var, Vec<f64>),
    Bce(Var, f64),
}

#[derive(Debug)]
struct Node {
    op: Op,
    // None for parameter nodes, whose value lives in the store.
    value: Option<Tensor>,
    shape: [usize; 2],
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, left: [usize; 2], right: [usize; 2]) -> NdiffError {
    NdiffError::ShapeMismatch { op, left, right }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (_, Some(t)) => t,
            (Op::Param(id), None) => self.params.get(*id),
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].shape
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let shape = value.shape();
        self.nodes.push(Node {
            op,
            value: Some(value),
            shape,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let shape = self.params.get(id).shape();
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            shape,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Const, value)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.constant(Tensor::zeros(rows, cols))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NdiffError> {
        let ([m, k], [k2, n]) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(mismatch("matmul", [m, k], [k2, n]));
        }
        let mut out = Tensor::zeros(m, n);
        gemm_acc(
            self.value(a).data(),
            self.value(b).data(),
            out.data_mut(),
            m,
            k,
            n,
        );
        Ok(self.push(Op::MatMul(a, b), out))
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, NdiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch(name, sa, sb));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Ok(Tensor::from_vec(sa[0], sa[1], data).expect("shape checked"))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NdiffError> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), out))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NdiffError> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), out))
    }

    /// `x (n x m) + bias (1 x m)`, bias broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, NdiffError> {
        let ([n, m], sb) = (self.shape(x), self.shape(bias));
        if sb != [1, m] {
            return Err(mismatch("add_bias", [n, m], sb));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data();
        for r in 0..n {
            for (o, bv) in out.data_mut()[r * m..(r + 1) * m].iter_mut().zip(b) {
                *o += bv;
            }
        }
        Ok(self.push(Op::AddBias(x, bias), out))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(x);
        let data = t.data().iter().map(|v| f(*v)).collect();
        Tensor::from_vec(t.rows(), t.cols(), data).expect("same shape")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.map(x, sigmoid);
        self.push(Op::Sigmoid(x), out)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.map(x, f64::tanh);
        self.push(Op::Tanh(x), out)
    }

    /// Sum of all entries, as a `1 x 1` scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    /// Column sums: `n x m` to `1 x m`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let mut out = vec![0.0; t.cols()];
        for r in 0..t.rows() {
            for (o, v) in out.iter_mut().zip(t.row_slice(r)) {
                *o += v;
            }
        }
        self.push(Op::SumRows(x), Tensor::row(out))
    }

    /// Divide by a constant.
    pub fn div_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.map(x, |v| v / c);
        self.push(Op::DivScalar(x, c), out)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.map(x, |v| v + c);
        self.push(Op::AddScalar(x), out)
    }

    /// `x * s` for a `1 x 1` variable `s`.
    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var, NdiffError> {
        let ss = self.shape(s);
        if ss != [1, 1] {
            return Err(mismatch("scale", self.shape(x), ss));
        }
        let k = self.value(s).item();
        let out = self.map(x, |v| v * k);
        Ok(self.push(Op::Scale(x, s), out))
    }

    /// `x / s` for a `1 x 1` variable `s`.
    pub fn div(&mut self, x: Var, s: Var) -> Result<Var, NdiffError> {
        let ss = self.shape(s);
        if ss != [1, 1] {
            return Err(mismatch("div", self.shape(x), ss));
        }
        let k = self.value(s).item();
        let out = self.map(x, |v| v / k);
        Ok(self.push(Op::Div(x, s), out))
    }

    /// Column-wise concatenation of tensors with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, NdiffError> {
        let Some(first) = parts.first() else {
            return Err(NdiffError::InvalidArgument("concat of zero tensors".into()));
        };
        let rows = self.shape(*first)[0];
        let mut cols = 0;
        for p in parts {
            let s = self.shape(*p);
            if s[0] != rows {
                return Err(mismatch("concat", self.shape(*first), s));
            }
            cols += s[1];
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let t = self.value(*p);
            for r in 0..rows {
                out.data_mut()[r * cols + offset..r * cols + offset + t.cols()]
                    .copy_from_slice(t.row_slice(r));
            }
            offset += t.cols();
        }
        Ok(self.push(Op::Concat(parts.to_vec()), out))
    }

    /// Row-wise stacking of tensors with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NdiffError> {
        let Some(first) = parts.first() else {
            return Err(NdiffError::InvalidArgument("concat_rows of zero tensors".into()));
        };
        let cols = self.shape(*first)[1];
        let mut data = Vec::new();
        for p in parts {
            let s = self.shape(*p);
            if s[1] != cols {
                return Err(mismatch("concat_rows", self.shape(*first), s));
            }
            data.extend_from_slice(self.value(*p).data());
        }
        let rows = data.len() / cols.max(1);
        let out = Tensor::from_vec(rows, cols, data)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), out))
    }

    /// Columns `[start, start + len)`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NdiffError> {
        let [rows, cols] = self.shape(x);
        if start + len > cols {
            return Err(mismatch("slice_cols", [rows, cols], [rows, start + len]));
        }
        let t = self.value(x);
        let out = Tensor::from_fn(rows, len, |r, c| t.get(r, start + c));
        Ok(self.push(Op::SliceCols(x, start), out))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::from_fn(t.cols(), t.rows(), |r, c| t.get(c, r));
        self.push(Op::Transpose(x), out)
    }

    /// Gathers rows of a parameter table: `ids.len() x cols`.
    pub fn embedding_lookup(&mut self, table: ParamId, ids: &[usize]) -> Result<Var, NdiffError> {
        let t = self.params.get(table);
        let mut data = Vec::with_capacity(ids.len() * t.cols());
        for &id in ids {
            if id >= t.rows() {
                return Err(NdiffError::IndexOutOfRange {
                    index: id,
                    rows: t.rows(),
                });
            }
            data.extend_from_slice(t.row_slice(id));
        }
        let out = Tensor::from_vec(ids.len(), t.cols(), data)?;
        Ok(self.push(Op::Embedding(table, ids.to_vec()), out))
    }

    /// Inverted dropout. Returns `x` unchanged when not training or when
    /// `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        rng: &mut R,
        training: bool,
    ) -> Result<Var, NdiffError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NdiffError::InvalidArgument(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let t = self.value(x);
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::from_vec(t.rows(), t.cols(), data)?;
        Ok(self.push(Op::Dropout(x, mask), out))
    }

    /// Binary cross-entropy of a `1 x 1` probability against label `y`.
    pub fn bce(&mut self, p: Var, y: f64) -> Result<Var, NdiffError> {
        let s = self.shape(p);
        if s != [1, 1] {
            return Err(mismatch("bce", s, [1, 1]));
        }
        let loss = bce_loss(self.value(p).item(), y);
        Ok(self.push(Op::Bce(p, y), Tensor::scalar(loss)))
    }

    /// Reverse pass from a `1 x 1` output. Parameter gradients are added to
    /// `grads`; nothing is zeroed first.
    pub fn backward(&self, output: Var, grads: &mut Grads) -> Result<(), NdiffError> {
        let s = self.shape(output);
        if s != [1, 1] {
            return Err(mismatch("backward", s, [1, 1]));
        }
        let mut node_grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        node_grads[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let Some(g) = node_grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Param(id) => {
                    for (acc, v) in grads.get_mut(*id).data_mut().iter_mut().zip(&g) {
                        *acc += v;
                    }
                }
                Op::Const => {}
                Op::MatMul(a, b) => {
                    let ([m, k], [_, n]) = (self.shape(*a), self.shape(*b));
                    let bv = self.value(*b).data();
                    let av = self.value(*a).data();
                    let ga = slot(&mut node_grads, *a, m * k);
                    gemm_nt_acc(&g, bv, ga, m, n, k);
                    let gb = slot(&mut node_grads, *b, k * n);
                    gemm_tn_acc(av, &g, gb, m, k, n);
                }
                Op::Add(a, b) => {
                    add_into(slot(&mut node_grads, *a, g.len()), &g);
                    add_into(slot(&mut node_grads, *b, g.len()), &g);
                }
                Op::AddBias(x, b) => {
                    let [n, m] = node.shape;
                    add_into(slot(&mut node_grads, *x, g.len()), &g);
                    let gb = slot(&mut node_grads, *b, m);
                    for r in 0..n {
                        add_into(gb, &g[r * m..(r + 1) * m]);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    let ga = slot(&mut node_grads, *a, g.len());
                    for ((acc, gi), bi) in ga.iter_mut().zip(&g).zip(bv) {
                        *acc += gi * bi;
                    }
                    let gb = slot(&mut node_grads, *b, g.len());
                    for ((acc, gi), ai) in gb.iter_mut().zip(&g).zip(av) {
                        *acc += gi * ai;
                    }
                }
                Op::Sigmoid(x) => {
                    let out = node.value.as_ref().expect("value").data();
                    let gx = slot(&mut node_grads, *x, g.len());
                    for ((acc, gi), s) in gx.iter_mut().zip(&g).zip(out) {
                        *acc += gi * s * (1.0 - s);
                    }
                }
                Op::Tanh(x) => {
                    let out = node.value.as_ref().expect("value").data();
                    let gx = slot(&mut node_grads, *x, g.len());
                    for ((acc, gi), t) in gx.iter_mut().zip(&g).zip(out) {
                        *acc += gi * (1.0 - t * t);
                    }
                }
                Op::Sum(x) => {
                    let n = self.value(*x).len();
                    slot(&mut node_grads, *x, n)
                        .iter_mut()
                        .for_each(|acc| *acc += g[0]);
                }
                Op::SumRows(x) => {
                    let [n, m] = self.shape(*x);
                    let gx = slot(&mut node_grads, *x, n * m);
                    for r in 0..n {
                        add_into(&mut gx[r * m..(r + 1) * m], &g);
                    }
                }
                Op::DivScalar(x, c) => {
                    let gx = slot(&mut node_grads, *x, g.len());
                    for (acc, gi) in gx.iter_mut().zip(&g) {
                        *acc += gi / c;
                    }
                }
                Op::AddScalar(x) => {
                    add_into(slot(&mut node_grads, *x, g.len()), &g);
                }
                Op::Scale(x, s) => {
                    let k = self.value(*s).item();
                    let xv = self.value(*x).data();
                    let gs: f64 = g.iter().zip(xv).map(|(gi, xi)| gi * xi).sum();
                    let gx = slot(&mut node_grads, *x, g.len());
                    for (acc, gi) in gx.iter_mut().zip(&g) {
                        *acc += gi * k;
                    }
                    slot(&mut node_grads, *s, 1)[0] += gs;
                }
                Op::Div(x, s) => {
                    let k = self.value(*s).item();
                    let xv = self.value(*x).data();
                    let gs: f64 = -g.iter().zip(xv).map(|(gi, xi)| gi * xi).sum::<f64>() / (k * k);
                    let gx = slot(&mut node_grads, *x, g.len());
                    for (acc, gi) in gx.iter_mut().zip(&g) {
                        *acc += gi / k;
                    }
                    slot(&mut node_grads, *s, 1)[0] += gs;
                }
                Op::Concat(parts) => {
                    let [rows, cols] = node.shape;
                    let mut offset = 0;
                    for p in parts {
                        let pc = self.shape(*p)[1];
                        let gp = slot(&mut node_grads, *p, rows * pc);
                        for r in 0..rows {
                            add_into(
                                &mut gp[r * pc..(r + 1) * pc],
                                &g[r * cols + offset..r * cols + offset + pc],
                            );
                        }
                        offset += pc;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.value(*p).len();
                        add_into(slot(&mut node_grads, *p, n), &g[offset..offset + n]);
                        offset += n;
                    }
                }
                Op::SliceCols(x, start) => {
                    let [rows, len] = node.shape;
                    let cols = self.shape(*x)[1];
                    let gx = slot(&mut node_grads, *x, rows * cols);
                    for r in 0..rows {
                        add_into(
                            &mut gx[r * cols + start..r * cols + start + len],
                            &g[r * len..(r + 1) * len],
                        );
                    }
                }
                Op::Transpose(x) => {
                    let [rows, cols] = self.shape(*x);
                    let gx = slot(&mut node_grads, *x, rows * cols);
                    // node is cols x rows
                    for r in 0..rows {
                        for c in 0..cols {
                            gx[r * cols + c] += g[c * rows + r];
                        }
                    }
                }
                Op::Embedding(table, ids) => {
                    let cols = node.shape[1];
                    let gt = grads.get_mut(*table).data_mut();
                    for (i, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * cols..(id + 1) * cols], &g[i * cols..(i + 1) * cols]);
                    }
                }
                Op::Dropout(x, mask) => {
                    let gx = slot(&mut node_grads, *x, g.len());
                    for ((acc, gi), m) in gx.iter_mut().zip(&g).zip(mask) {
                        *acc += gi * m;
                    }
                }
                Op::Bce(p, y) => {
                    let pv = self.value(*p).item().clamp(BCE_EPS, 1.0 - BCE_EPS);
                    slot(&mut node_grads, *p, 1)[0] += g[0] * bce_grad(pv, *y);
                }
            }
        }
        Ok(())
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-(y ln p + (1 - y) ln(1 - p))` with `p` clamped to `[1e-12, 1 - 1e-12]`.
pub fn bce_loss(p: f64, y: f64) -> f64 {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// `dL/dp = (p - y) / (p (1 - p))`.
pub fn bce_grad(p: f64, y: f64) -> f64 {
    (p - y) / (p * (1.0 - p))
}
