//! Reverse-mode differentiation over a per-forward tape.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters enter
//! the tape as leaves bound to a [`ParamId`] in a [`ParamSet`]; calling
//! [`Tape::backward`] on a scalar node yields one gradient matrix per
//! parameter of the set (zeros for parameters the loss never touched).

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::matrix::{matmul, matmul_transposed, transposed_matmul, Matrix};
use crate::error::{shape_err, Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Index of a parameter tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of parameter tensors.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Matrix>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Matrix] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Matrix] {
        &mut self.tensors
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Matrix::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Matrix::is_finite)
    }

    /// Zero-valued gradient set with this layout.
    pub fn zeros_like(&self) -> Gradients {
        Gradients {
            grads: self
                .tensors
                .iter()
                .map(|t| Matrix::zeros(t.rows(), t.cols()))
                .collect(),
        }
    }

    /// Overwrite values with those of `other`, which must share the layout.
    pub fn copy_from(&mut self, other: &ParamSet) {
        debug_assert_eq!(self.names, other.names);
        self.tensors.clone_from(&other.tensors);
    }

    /// Flat scalar view `(tensor, offset)` → value, used by finite differences.
    pub(crate) fn scalar_mut(&mut self, flat: usize) -> &mut f64 {
        let mut rest = flat;
        for t in &mut self.tensors {
            if rest < t.len() {
                return &mut t.as_mut_slice()[rest];
            }
            rest -= t.len();
        }
        panic!("flat parameter index {flat} out of range");
    }
}

/// One gradient tensor per parameter, aligned with a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Matrix>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.grads[id.0]
    }

    pub fn tensors(&self) -> &[Matrix] {
        &self.grads
    }

    pub fn tensors_mut(&mut self) -> &mut [Matrix] {
        &mut self.grads
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Matrix::is_finite)
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.as_slice())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescale so the global L2 norm does not exceed `max_norm`; returns the pre-clip norm.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for g in &mut self.grads {
                g.scale_assign(s);
            }
        }
        norm
    }

    pub(crate) fn flat(&self, flat: usize) -> f64 {
        let mut rest = flat;
        for g in &self.grads {
            if rest < g.len() {
                return g.as_slice()[rest];
            }
            rest -= g.len();
        }
        panic!("flat gradient index {flat} out of range");
    }
}

/// Elementwise nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
    Abs,
    Elu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Abs => x.abs(),
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
        }
    }

    /// Derivative given input `x` and output `y`.
    #[inline]
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
        }
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

/// Handle to a node of a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf(Option<ParamId>),
    Linear { x: usize, w: usize, b: Option<usize> },
    Add(usize, usize),
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Act(usize, Activation),
    Sum(usize),
    RowSum(usize),
    Gather(usize, Vec<usize>),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols(usize, usize),
    Reshape(usize),
    RowMatVec { q: usize, w: usize },
    RowDot(usize, usize),
    Log { x: usize, lo: f64, hi: f64 },
    Exp(usize),
    LogSoftmax(usize),
    Clamp { x: usize, lo: f64, hi: f64 },
    Min(usize, usize),
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward pass.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::Graph("variable does not belong to this tape".into()));
        }
        Ok(v.idx)
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        assert_eq!(v.tape, self.id, "variable does not belong to this tape");
        &self.nodes[v.idx].value
    }

    /// Scalar value of a `1x1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).get(0, 0)
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf(None), false)
    }

    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        self.push(params.get(id).clone(), Op::Leaf(Some(id)), true)
    }

    /// Bind every parameter of `params` as a tape leaf.
    pub fn bind(&mut self, params: &ParamSet) -> Bound {
        Bound {
            vars: (0..params.len())
                .map(|i| self.param(params, ParamId(i)))
                .collect(),
        }
    }

    /// `x · wᵀ + b` with `x: m×in`, `w: out×in`, `b: 1×out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let (xv, wv) = (&self.nodes[xi].value, &self.nodes[wi].value);
        if xv.cols() != wv.cols() {
            return Err(shape_err(
                "linear",
                format!("input width {}", wv.cols()),
                xv.cols(),
            ));
        }
        let mut out = matmul_transposed(xv, wv);
        let mut rg = self.rg(xi) || self.rg(wi);
        let bi = match b {
            Some(b) => {
                let bi = self.idx(b)?;
                let bv = &self.nodes[bi].value;
                if bv.rows() != 1 || bv.cols() != out.cols() {
                    return Err(shape_err(
                        "linear bias",
                        format!("1x{}", out.cols()),
                        format!("{}x{}", bv.rows(), bv.cols()),
                    ));
                }
                for r in 0..out.rows() {
                    for (o, bb) in out.row_slice_mut(r).iter_mut().zip(bv.as_slice()) {
                        *o += bb;
                    }
                }
                rg |= self.rg(bi);
                Some(bi)
            }
            None => None,
        };
        Ok(self.push(out, Op::Linear { x: xi, w: wi, b: bi }, rg))
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?}"), format!("{sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&self, a: usize, b: usize, f: impl Fn(f64, f64) -> f64) -> Matrix {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        let data = av
            .as_slice()
            .iter()
            .zip(bv.as_slice())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Matrix::from_vec(av.rows(), av.cols(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("add", ai, bi)?;
        let out = self.zip_with(ai, bi, |x, y| x + y);
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(out, Op::Add(ai, bi), rg))
    }

    /// Adds the `1×c` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ai, ri) = (self.idx(a)?, self.idx(row)?);
        let (av, rv) = (&self.nodes[ai].value, &self.nodes[ri].value);
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(shape_err(
                "add_row",
                format!("1x{}", av.cols()),
                format!("{:?}", rv.shape()),
            ));
        }
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, x) in out.row_slice_mut(r).iter_mut().zip(rv.as_slice()) {
                *o += x;
            }
        }
        let rg = self.rg(ai) || self.rg(ri);
        Ok(self.push(out, Op::AddRow(ai, ri), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("sub", ai, bi)?;
        let out = self.zip_with(ai, bi, |x, y| x - y);
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(out, Op::Sub(ai, bi), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("mul", ai, bi)?;
        let out = self.zip_with(ai, bi, |x, y| x * y);
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(out, Op::Mul(ai, bi), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let ai = self.idx(a)?;
        let out = self.nodes[ai].value.map(|x| x * s);
        let rg = self.rg(ai);
        Ok(self.push(out, Op::Scale(ai, s), rg))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let ai = self.idx(a)?;
        let out = self.nodes[ai].value.map(|x| x + s);
        let rg = self.rg(ai);
        Ok(self.push(out, Op::AddScalar(ai), rg))
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let n = self.scale(a, -1.0)?;
        self.add_scalar(n, 1.0)
    }

    pub fn act(&mut self, a: Var, act: Activation) -> Result<Var> {
        let ai = self.idx(a)?;
        if act == Activation::Identity {
            return Ok(a);
        }
        let out = self.nodes[ai].value.map(|x| act.apply(x));
        let rg = self.rg(ai);
        Ok(self.push(out, Op::Act(ai, act), rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a)?;
        let s = self.nodes[ai].value.sum();
        let rg = self.rg(ai);
        Ok(self.push(Matrix::filled(1, 1, s), Op::Sum(ai), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::Numeric("mean of empty tensor".into()));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Per-row sum, `m×n → m×1`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a)?;
        let av = &self.nodes[ai].value;
        let data = (0..av.rows()).map(|r| av.row_slice(r).iter().sum()).collect();
        let out = Matrix::from_vec(av.rows(), 1, data)?;
        let rg = self.rg(ai);
        Ok(self.push(out, Op::RowSum(ai), rg))
    }

    /// `out[i] = a[i][cols[i]]`, giving `m×1`.
    pub fn gather(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let ai = self.idx(a)?;
        let av = &self.nodes[ai].value;
        if cols.len() != av.rows() {
            return Err(shape_err("gather", av.rows(), cols.len()));
        }
        let mut data = Vec::with_capacity(cols.len());
        for (r, &c) in cols.iter().enumerate() {
            if c >= av.cols() {
                return Err(shape_err("gather index", format!("< {}", av.cols()), c));
            }
            data.push(av.get(r, c));
        }
        let out = Matrix::from_vec(cols.len(), 1, data)?;
        let rg = self.rg(ai);
        Ok(self.push(out, Op::Gather(ai, cols.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let idxs = parts
            .iter()
            .map(|&p| self.idx(p))
            .collect::<Result<Vec<_>>>()?;
        let rows = idxs
            .first()
            .map(|&i| self.nodes[i].value.rows())
            .ok_or_else(|| Error::Graph("concat of nothing".into()))?;
        let mut cols = 0;
        for &i in &idxs {
            let v = &self.nodes[i].value;
            if v.rows() != rows {
                return Err(shape_err("concat_cols", rows, v.rows()));
            }
            cols += v.cols();
        }
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &i in &idxs {
                let src = self.nodes[i].value.row_slice(r);
                out.row_slice_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let rg = idxs.iter().any(|&i| self.rg(i));
        Ok(self.push(out, Op::ConcatCols(idxs), rg))
    }

    /// Stack matrices of equal width vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let idxs = parts
            .iter()
            .map(|&p| self.idx(p))
            .collect::<Result<Vec<_>>>()?;
        let cols = idxs
            .first()
            .map(|&i| self.nodes[i].value.cols())
            .ok_or_else(|| Error::Graph("concat of nothing".into()))?;
        let mut data = Vec::new();
        for &i in &idxs {
            let v = &self.nodes[i].value;
            if v.cols() != cols {
                return Err(shape_err("concat_rows", cols, v.cols()));
            }
            data.extend_from_slice(v.as_slice());
        }
        let out = Matrix::from_vec(data.len() / cols.max(1), cols, data)?;
        let rg = idxs.iter().any(|&i| self.rg(i));
        Ok(self.push(out, Op::ConcatRows(idxs), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ai = self.idx(a)?;
        let av = &self.nodes[ai].value;
        if start + len > av.cols() {
            return Err(shape_err("slice_cols", av.cols(), start + len));
        }
        let mut out = Matrix::zeros(av.rows(), len);
        for r in 0..av.rows() {
            out.row_slice_mut(r)
                .copy_from_slice(&av.row_slice(r)[start..start + len]);
        }
        let rg = self.rg(ai);
        Ok(self.push(out, Op::SliceCols(ai, start), rg))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let ai = self.idx(a)?;
        let out = self.nodes[ai].value.clone().reshape(rows, cols)?;
        let rg = self.rg(ai);
        Ok(self.push(out, Op::Reshape(ai), rg))
    }

    /// Per-row vector–matrix product: `q: B×n`, `w: B×(n·e)` holding one
    /// row-major `n×e` matrix per row; output `B×e`.
    pub fn row_matvec(&mut self, q: Var, w: Var) -> Result<Var> {
        let (qi, wi) = (self.idx(q)?, self.idx(w)?);
        let (qv, wv) = (&self.nodes[qi].value, &self.nodes[wi].value);
        let (b, n) = qv.shape();
        if wv.rows() != b || n == 0 || wv.cols() % n != 0 {
            return Err(shape_err(
                "row_matvec",
                format!("{b}x(k*{n})"),
                format!("{:?}", wv.shape()),
            ));
        }
        let e = wv.cols() / n;
        let mut out = Matrix::zeros(b, e);
        for r in 0..b {
            let qr = qv.row_slice(r);
            let wr = wv.row_slice(r);
            let or = out.row_slice_mut(r);
            for (i, &qx) in qr.iter().enumerate() {
                for (o, wx) in or.iter_mut().zip(&wr[i * e..(i + 1) * e]) {
                    *o += qx * wx;
                }
            }
        }
        let rg = self.rg(qi) || self.rg(wi);
        Ok(self.push(out, Op::RowMatVec { q: qi, w: wi }, rg))
    }

    /// Per-row dot product, `B×e, B×e → B×1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("row_dot", ai, bi)?;
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let data = (0..av.rows())
            .map(|r| {
                av.row_slice(r)
                    .iter()
                    .zip(bv.row_slice(r))
                    .map(|(x, y)| x * y)
                    .sum()
            })
            .collect();
        let out = Matrix::from_vec(av.rows(), 1, data)?;
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(out, Op::RowDot(ai, bi), rg))
    }

    /// `ln(clamp(a, lo, hi))`; gradient is zero where the clamp is active.
    pub fn log_clamped(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let ai = self.idx(a)?;
        let out = self.nodes[ai].value.map(|x| x.clamp(lo, hi).ln());
        let rg = self.rg(ai);
        Ok(self.push(out, Op::Log { x: ai, lo, hi }, rg))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a)?;
        let out = self.nodes[ai].value.map(f64::exp);
        let rg = self.rg(ai);
        Ok(self.push(out, Op::Exp(ai), rg))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a)?;
        let mut out = self.nodes[ai].value.clone();
        for r in 0..out.rows() {
            let row = out.row_slice_mut(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let rg = self.rg(ai);
        Ok(self.push(out, Op::LogSoftmax(ai), rg))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let ai = self.idx(a)?;
        let out = self.nodes[ai].value.map(|x| x.clamp(lo, hi));
        let rg = self.rg(ai);
        Ok(self.push(out, Op::Clamp { x: ai, lo, hi }, rg))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("min", ai, bi)?;
        let out = self.zip_with(ai, bi, f64::min);
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(out, Op::Min(ai, bi), rg))
    }

    /// Gradients of the scalar `loss` with respect to every parameter of a
    /// set with `n_params` tensors whose shapes are taken from `params`.
    pub fn backward(&self, loss: Var, params: &ParamSet) -> Result<Gradients> {
        let li = self.idx(loss)?;
        if self.nodes[li].value.shape() != (1, 1) {
            return Err(Error::Graph(format!(
                "loss must be a 1x1 scalar, got {:?}",
                self.nodes[li].value.shape()
            )));
        }
        let mut out = params.zeros_like();
        let mut grads: Vec<Option<Matrix>> = vec![None; li + 1];
        grads[li] = Some(Matrix::filled(1, 1, 1.0));

        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf(Some(pid)) => {
                    let target = out
                        .grads
                        .get_mut(pid.0)
                        .ok_or_else(|| Error::Graph("parameter outside gradient set".into()))?;
                    if target.shape() != g.shape() {
                        return Err(shape_err(
                            "backward param",
                            format!("{:?}", target.shape()),
                            format!("{:?}", g.shape()),
                        ));
                    }
                    target.add_assign(&g);
                }
                Op::Leaf(None) => {}
                Op::Linear { x, w, b } => {
                    if self.rg(*x) {
                        let dx = matmul(&g, &self.nodes[*w].value);
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.rg(*w) {
                        let dw = transposed_matmul(&g, &self.nodes[*x].value);
                        accumulate(&mut grads, *w, dw);
                    }
                    if let Some(b) = b {
                        if self.rg(*b) {
                            accumulate(&mut grads, *b, col_sum(&g));
                        }
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::AddRow(a, r) => {
                    if self.rg(*r) {
                        accumulate(&mut grads, *r, col_sum(&g));
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.map(|x| -x));
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        let d = elementwise(&g, &self.nodes[*b].value, |x, y| x * y);
                        accumulate(&mut grads, *a, d);
                    }
                    if self.rg(*b) {
                        let d = elementwise(&g, &self.nodes[*a].value, |x, y| x * y);
                        accumulate(&mut grads, *b, d);
                    }
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.map(|x| x * s)),
                Op::AddScalar(a) | Op::Reshape(a) => {
                    let (r, c) = self.nodes[*a].value.shape();
                    accumulate(&mut grads, *a, g.reshape(r, c)?);
                }
                Op::Act(a, act) => {
                    let xv = &self.nodes[*a].value;
                    let yv = &node.value;
                    let data = g
                        .as_slice()
                        .iter()
                        .zip(xv.as_slice().iter().zip(yv.as_slice()))
                        .map(|(gg, (&x, &y))| gg * act.derivative(x, y))
                        .collect();
                    accumulate(&mut grads, *a, Matrix::from_vec(xv.rows(), xv.cols(), data)?);
                }
                Op::Sum(a) => {
                    let (r, c) = self.nodes[*a].value.shape();
                    accumulate(&mut grads, *a, Matrix::filled(r, c, g.get(0, 0)));
                }
                Op::RowSum(a) => {
                    let (r, c) = self.nodes[*a].value.shape();
                    let mut d = Matrix::zeros(r, c);
                    for i in 0..r {
                        d.row_slice_mut(i).fill(g.get(i, 0));
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Gather(a, cols) => {
                    let (r, c) = self.nodes[*a].value.shape();
                    let mut d = Matrix::zeros(r, c);
                    for (i, &col) in cols.iter().enumerate() {
                        d.set(i, col, g.get(i, 0));
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (r, c) = self.nodes[p].value.shape();
                        if self.rg(p) {
                            let mut d = Matrix::zeros(r, c);
                            for i in 0..r {
                                d.row_slice_mut(i)
                                    .copy_from_slice(&g.row_slice(i)[off..off + c]);
                            }
                            accumulate(&mut grads, p, d);
                        }
                        off += c;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = self.nodes[p].value.len();
                        if self.rg(p) {
                            let (r, c) = self.nodes[p].value.shape();
                            let d = Matrix::from_vec(r, c, g.as_slice()[off..off + n].to_vec())?;
                            accumulate(&mut grads, p, d);
                        }
                        off += n;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = self.nodes[*a].value.shape();
                    let len = g.cols();
                    let mut d = Matrix::zeros(r, c);
                    for i in 0..r {
                        d.row_slice_mut(i)[*start..*start + len].copy_from_slice(g.row_slice(i));
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::RowMatVec { q, w } => {
                    let (qv, wv) = (&self.nodes[*q].value, &self.nodes[*w].value);
                    let (b, n) = qv.shape();
                    let e = wv.cols() / n;
                    if self.rg(*q) {
                        let mut dq = Matrix::zeros(b, n);
                        for r in 0..b {
                            let gr = g.row_slice(r);
                            let wr = wv.row_slice(r);
                            for i in 0..n {
                                let s: f64 = gr
                                    .iter()
                                    .zip(&wr[i * e..(i + 1) * e])
                                    .map(|(x, y)| x * y)
                                    .sum();
                                dq.set(r, i, s);
                            }
                        }
                        accumulate(&mut grads, *q, dq);
                    }
                    if self.rg(*w) {
                        let mut dw = Matrix::zeros(b, n * e);
                        for r in 0..b {
                            let gr = g.row_slice(r);
                            let qr = qv.row_slice(r);
                            let dr = dw.row_slice_mut(r);
                            for (i, &qx) in qr.iter().enumerate() {
                                for (d, gx) in dr[i * e..(i + 1) * e].iter_mut().zip(gr) {
                                    *d = qx * gx;
                                }
                            }
                        }
                        accumulate(&mut grads, *w, dw);
                    }
                }
                Op::RowDot(a, b) => {
                    for (src, other) in [(*a, *b), (*b, *a)] {
                        if !self.rg(src) {
                            continue;
                        }
                        let ov = &self.nodes[other].value;
                        let mut d = ov.clone();
                        for r in 0..d.rows() {
                            let gg = g.get(r, 0);
                            for x in d.row_slice_mut(r) {
                                *x *= gg;
                            }
                        }
                        accumulate(&mut grads, src, d);
                    }
                }
                Op::Log { x, lo, hi } => {
                    let xv = &self.nodes[*x].value;
                    let d = elementwise(&g, xv, |gg, xx| {
                        if xx < *lo || xx > *hi {
                            0.0
                        } else {
                            gg / xx
                        }
                    });
                    accumulate(&mut grads, *x, d);
                }
                Op::Exp(a) => {
                    let d = elementwise(&g, &node.value, |gg, y| gg * y);
                    accumulate(&mut grads, *a, d);
                }
                Op::LogSoftmax(a) => {
                    let y = &node.value;
                    let mut d = g.clone();
                    for r in 0..d.rows() {
                        let gs: f64 = g.row_slice(r).iter().sum();
                        for (dx, yy) in d.row_slice_mut(r).iter_mut().zip(y.row_slice(r)) {
                            *dx -= yy.exp() * gs;
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Clamp { x, lo, hi } => {
                    let xv = &self.nodes[*x].value;
                    let d = elementwise(&g, xv, |gg, xx| {
                        if xx < *lo || xx > *hi {
                            0.0
                        } else {
                            gg
                        }
                    });
                    accumulate(&mut grads, *x, d);
                }
                Op::Min(a, b) => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    let mut db = Matrix::zeros(av.rows(), av.cols());
                    for k in 0..g.len() {
                        if av.as_slice()[k] <= bv.as_slice()[k] {
                            da.as_mut_slice()[k] = g.as_slice()[k];
                        } else {
                            db.as_mut_slice()[k] = g.as_slice()[k];
                        }
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, da);
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, db);
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Parameter leaves of one [`ParamSet`] bound to a tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

fn accumulate(grads: &mut [Option<Matrix>], i: usize, d: Matrix) {
    match &mut grads[i] {
        Some(g) => g.add_assign(&d),
        slot @ None => *slot = Some(d),
    }
}

fn col_sum(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, x) in out.as_mut_slice().iter_mut().zip(g.row_slice(r)) {
            *o += x;
        }
    }
    out
}

fn elementwise(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Matrix::from_vec(a.rows(), a.cols(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(m: Matrix) -> (ParamSet, ParamId) {
        let mut p = ParamSet::new();
        let id = p.add("w", m);
        (p, id)
    }

    #[test]
    fn linear_sum_gradient_is_input_per_row() {
        let (params, w) = one_param(Matrix::from_rows(&[vec![0.3, -0.2], vec![1.0, 2.0]]).unwrap());
        let mut tape = Tape::new();
        let wv = tape.param(&params, w);
        let x = tape.constant(Matrix::row(&[1.0, 1.0]));
        let y = tape.linear(x, wv, None).unwrap();
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss, &params).unwrap();
        assert_eq!(g.get(w).as_slice(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn sigmoid_at_zero_has_quarter_slope() {
        let (params, w) = one_param(Matrix::row(&[0.0, 0.0]));
        let mut tape = Tape::new();
        let wv = tape.param(&params, w);
        let x = tape.constant(Matrix::row(&[2.0, -3.0]));
        let z = tape.linear(x, wv, None).unwrap();
        let s = tape.act(z, Activation::Sigmoid).unwrap();
        let loss = tape.sum(s).unwrap();
        let g = tape.backward(loss, &params).unwrap();
        assert!((g.get(w).get(0, 0) - 0.5).abs() < 1e-15);
        assert!((g.get(w).get(0, 1) + 0.75).abs() < 1e-15);
    }

    #[test]
    fn untouched_parameters_get_zero_gradient() {
        let mut params = ParamSet::new();
        let a = params.add("a", Matrix::row(&[2.0]));
        let b = params.add("b", Matrix::row(&[5.0, 6.0]));
        let mut tape = Tape::new();
        let av = tape.param(&params, a);
        let loss = tape.mul(av, av).unwrap();
        let g = tape.backward(loss, &params).unwrap();
        assert_eq!(g.get(a).as_slice(), &[4.0]);
        assert_eq!(g.get(b).as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn foreign_or_non_scalar_loss_is_a_graph_error() {
        let (params, w) = one_param(Matrix::row(&[1.0, 2.0]));
        let mut t1 = Tape::new();
        let v1 = t1.param(&params, w);
        let t2 = Tape::new();
        assert!(matches!(t2.backward(v1, &params), Err(Error::Graph(_))));
        assert!(matches!(t1.backward(v1, &params), Err(Error::Graph(_))));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut tape = Tape::new();
        let a = tape.constant(Matrix::zeros(2, 3));
        let b = tape.constant(Matrix::zeros(3, 2));
        assert!(matches!(tape.add(a, b), Err(Error::Shape { .. })));
        assert!(tape.linear(a, a, None).is_ok());
        assert!(matches!(tape.linear(a, b, None), Err(Error::Shape { .. })));
    }

    #[test]
    fn concat_rows_routes_gradients_by_block() {
        let mut params = ParamSet::new();
        let a = params.add("a", Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let b = params.add("b", Matrix::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap());
        let mut tape = Tape::new();
        let bound = tape.bind(&params);
        let cat = tape.concat_rows(&[bound.var(a), bound.var(b)]).unwrap();
        assert_eq!(tape.value(cat).shape(), (3, 2));
        let w = tape.constant(Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0], vec![3.0, 0.0]]).unwrap());
        let prod = tape.mul(cat, w).unwrap();
        let loss = tape.sum(prod).unwrap();
        let g = tape.backward(loss, &params).unwrap();
        assert_eq!(g.get(a).as_slice(), &[1.0, 0.0]);
        assert_eq!(g.get(b).as_slice(), &[0.0, 2.0, 3.0, 0.0]);
    }
}
