//! Tape-based reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! the gradient of that scalar with respect to every node that requires one.
//! Parameters enter the tape through [`Graph::param`]; frozen parameters are
//! recorded as constants and never receive gradient.

use std::collections::HashMap;

use crate::matrix::{gemm, Matrix};
use crate::params::{ParamId, ParamStore};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddCol(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Silu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Sin(Var),
    Cos(Var),
    Sqrt(Var),
    Abs(Var),
    Square(Var),
    Softmax(Var),
    LayerNorm(Var, f64),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SelectCols(Var, Vec<usize>),
    SelectRows(Var, Vec<usize>),
    CumsumExclusive(Var),
    Minimum(Var, Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    SumCols(Var),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Recording tape for one forward/backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient with respect to `v`, if `v` required one and was reached.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients for every parameter in `store`, aligned with its ids.
    ///
    /// Parameters that were frozen, unused, or unreachable get an all-zero
    /// matrix of the right shape.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Matrix> {
        let mut out: Vec<Matrix> = store
            .ids()
            .map(|id| {
                let (r, c) = store.value(id).shape();
                Matrix::zeros(r, c)
            })
            .collect();
        for &(id, var) in &self.params {
            if let Some(g) = self.wrt(var) {
                out[id.index()].add_assign(g);
            }
        }
        out
    }
}

fn colsum(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.cols());
    let o = out.data_mut();
    for r in 0..m.rows() {
        for (acc, v) in o.iter_mut().zip(m.row(r)) {
            *acc += v;
        }
    }
    out
}

fn rowsum(m: &Matrix) -> Matrix {
    Matrix::column_vector((0..m.rows()).map(|r| m.row(r).iter().sum()).collect())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf holding `value`; gradients flow to it when `requires_grad`.
    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.leaf(value, false)
    }

    /// Brings a parameter onto the tape. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, !store.is_frozen(id));
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (ra, rb) = (self.value(a).rows(), self.value(b).rows());
        let mut out = Matrix::zeros(ra, rb);
        gemm(self.value(a), false, self.value(b), true, &mut out, 0.0);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMulNT(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(v, Op::Transpose(a), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (am, rm) = (self.value(a), self.value(row));
        assert_eq!(rm.rows(), 1, "add_row expects a 1 x c row");
        assert_eq!(am.cols(), rm.cols(), "add_row column mismatch");
        let mut v = am.clone();
        for r in 0..v.rows() {
            for (x, b) in v.row_mut(r).iter_mut().zip(rm.data()) {
                *x += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(v, Op::AddRow(a, row), ng)
    }

    /// Multiplies every row of `a` elementwise by a `1 x c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (am, rm) = (self.value(a), self.value(row));
        assert_eq!(rm.rows(), 1, "mul_row expects a 1 x c row");
        assert_eq!(am.cols(), rm.cols(), "mul_row column mismatch");
        let mut v = am.clone();
        for r in 0..v.rows() {
            for (x, b) in v.row_mut(r).iter_mut().zip(rm.data()) {
                *x *= b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(v, Op::MulRow(a, row), ng)
    }

    /// Adds an `r x 1` column to every column of `a`.
    pub fn add_col(&mut self, a: Var, col: Var) -> Var {
        let (am, cm) = (self.value(a), self.value(col));
        assert_eq!(cm.cols(), 1, "add_col expects an r x 1 column");
        assert_eq!(am.rows(), cm.rows(), "add_col row mismatch");
        let mut v = am.clone();
        for r in 0..v.rows() {
            let c = cm.data()[r];
            for x in v.row_mut(r) {
                *x += c;
            }
        }
        let ng = self.ng(a) || self.ng(col);
        self.push(v, Op::AddCol(a, col), ng)
    }

    /// Multiplies every column of `a` elementwise by an `r x 1` column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (am, cm) = (self.value(a), self.value(col));
        assert_eq!(cm.cols(), 1, "mul_col expects an r x 1 column");
        assert_eq!(am.rows(), cm.rows(), "mul_col row mismatch");
        let mut v = am.clone();
        for r in 0..v.rows() {
            let c = cm.data()[r];
            for x in v.row_mut(r) {
                *x *= c;
            }
        }
        let ng = self.ng(a) || self.ng(col);
        self.push(v, Op::MulCol(a, col), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        let ng = self.ng(a);
        self.push(v, Op::AddScalar(a), ng)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let v = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(v, op, ng)
    }

    /// `x · sigmoid(x)`
    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Silu(a), |x| x * sigmoid(x))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    /// Natural logarithm of a positive input.
    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), f64::ln)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sin(a), f64::sin)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Op::Cos(a), f64::cos)
    }

    /// Elementwise square root of a non-negative input. The derivative at 0
    /// is taken as 0, which makes Euclidean norms built from it usable at
    /// their minimizer.
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), |x| x.max(0.0).sqrt())
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        let ng = self.ng(a);
        self.push(v, Op::Softmax(a), ng)
    }

    /// Row-wise normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let mut v = self.value(a).clone();
        let n = v.cols() as f64;
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let rstd = 1.0 / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * rstd;
            }
        }
        let ng = self.ng(a);
        self.push(v, Op::LayerNorm(a, eps), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let m = self.value(p);
                assert_eq!(m.rows(), rows, "concat_cols row mismatch");
                out.row_mut(r)[off..off + m.cols()].copy_from_slice(m.row(r));
                off += m.cols();
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(m.data());
            rows += m.rows();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Columns `start..start + len` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = self.value(a);
        assert!(start + len <= m.cols(), "slice_cols out of range");
        let mut out = Matrix::zeros(m.rows(), len);
        for r in 0..m.rows() {
            out.row_mut(r).copy_from_slice(&m.row(r)[start..start + len]);
        }
        let ng = self.ng(a);
        self.push(out, Op::SliceCols(a, start), ng)
    }

    /// Gathers columns of `a` by index (indices may repeat).
    pub fn select_cols(&mut self, a: Var, idx: &[usize]) -> Var {
        let m = self.value(a);
        let mut out = Matrix::zeros(m.rows(), idx.len());
        for r in 0..m.rows() {
            let src = m.row(r);
            for (o, &i) in out.row_mut(r).iter_mut().zip(idx) {
                *o = src[i];
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::SelectCols(a, idx.to_vec()), ng)
    }

    /// Gathers rows of `a` by index (indices may repeat).
    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let m = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * m.cols());
        for &i in idx {
            data.extend_from_slice(m.row(i));
        }
        let out = Matrix::from_vec(idx.len(), m.cols(), data);
        let ng = self.ng(a);
        self.push(out, Op::SelectRows(a, idx.to_vec()), ng)
    }

    /// Exclusive prefix sum down the rows: `out[i] = Σ_{k<i} a[k]`.
    pub fn cumsum_exclusive(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut out = Matrix::zeros(m.rows(), m.cols());
        for r in 1..m.rows() {
            for c in 0..m.cols() {
                let v = out.get(r - 1, c) + m.get(r - 1, c);
                out.set(r, c, v);
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::CumsumExclusive(a), ng)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), f64::min);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Minimum(a, b), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Matrix::scalar(self.value(a).mean());
        let ng = self.ng(a);
        self.push(v, Op::Mean(a), ng)
    }

    /// Mean over rows, giving a `1 x c` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let n = m.rows().max(1) as f64;
        let v = colsum(m).scale(1.0 / n);
        let ng = self.ng(a);
        self.push(v, Op::MeanRows(a), ng)
    }

    /// Sum across each row, giving an `r x 1` column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = rowsum(self.value(a));
        let ng = self.ng(a);
        self.push(v, Op::SumCols(a), ng)
    }

    /// Reverse pass from the scalar node `out`.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.shape(out), (1, 1), "backward expects a scalar output");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Matrix::scalar(1.0));

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }

        let params = self.param_vars.iter().map(|(&id, &v)| (id, v)).collect();
        Gradients { grads, params }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, out: &Matrix, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match *op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (am, bm) = (self.value(a), self.value(b));
                if self.ng(a) {
                    let mut ga = Matrix::zeros(am.rows(), am.cols());
                    gemm(g, false, bm, true, &mut ga, 0.0);
                    self.accumulate(grads, a, ga);
                }
                if self.ng(b) {
                    let mut gb = Matrix::zeros(bm.rows(), bm.cols());
                    gemm(am, true, g, false, &mut gb, 0.0);
                    self.accumulate(grads, b, gb);
                }
            }
            Op::MatMulNT(a, b) => {
                let (am, bm) = (self.value(a), self.value(b));
                if self.ng(a) {
                    let mut ga = Matrix::zeros(am.rows(), am.cols());
                    gemm(g, false, bm, false, &mut ga, 0.0);
                    self.accumulate(grads, a, ga);
                }
                if self.ng(b) {
                    let mut gb = Matrix::zeros(bm.rows(), bm.cols());
                    gemm(g, true, am, false, &mut gb, 0.0);
                    self.accumulate(grads, b, gb);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, a, g.transpose()),
            Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.ng(a) {
                    self.accumulate(grads, a, g.zip_map(self.value(b), |x, y| x * y));
                }
                if self.ng(b) {
                    self.accumulate(grads, b, g.zip_map(self.value(a), |x, y| x * y));
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, a, g.clone());
                if self.ng(row) {
                    self.accumulate(grads, row, colsum(g));
                }
            }
            Op::MulRow(a, row) => {
                let (am, rm) = (self.value(a), self.value(row));
                if self.ng(a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        for (x, b) in ga.row_mut(r).iter_mut().zip(rm.data()) {
                            *x *= b;
                        }
                    }
                    self.accumulate(grads, a, ga);
                }
                if self.ng(row) {
                    self.accumulate(grads, row, colsum(&g.zip_map(am, |x, y| x * y)));
                }
            }
            Op::AddCol(a, col) => {
                self.accumulate(grads, a, g.clone());
                if self.ng(col) {
                    self.accumulate(grads, col, rowsum(g));
                }
            }
            Op::MulCol(a, col) => {
                let (am, cm) = (self.value(a), self.value(col));
                if self.ng(a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        let c = cm.data()[r];
                        for x in ga.row_mut(r) {
                            *x *= c;
                        }
                    }
                    self.accumulate(grads, a, ga);
                }
                if self.ng(col) {
                    self.accumulate(grads, col, rowsum(&g.zip_map(am, |x, y| x * y)));
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, a, g.scale(s)),
            Op::AddScalar(a) => self.accumulate(grads, a, g.clone()),
            Op::Silu(a) => {
                let d = g.zip_map(self.value(a), |gi, x| {
                    let s = sigmoid(x);
                    gi * s * (1.0 + x * (1.0 - s))
                });
                self.accumulate(grads, a, d);
            }
            Op::Tanh(a) => self.accumulate(grads, a, g.zip_map(out, |gi, y| gi * (1.0 - y * y))),
            Op::Sigmoid(a) => self.accumulate(grads, a, g.zip_map(out, |gi, y| gi * y * (1.0 - y))),
            Op::Exp(a) => self.accumulate(grads, a, g.zip_map(out, |gi, y| gi * y)),
            Op::Ln(a) => self.accumulate(grads, a, g.zip_map(self.value(a), |gi, x| gi / x)),
            Op::Sin(a) => self.accumulate(grads, a, g.zip_map(self.value(a), |gi, x| gi * x.cos())),
            Op::Cos(a) => {
                self.accumulate(grads, a, g.zip_map(self.value(a), |gi, x| -gi * x.sin()))
            }
            Op::Sqrt(a) => self.accumulate(
                grads,
                a,
                g.zip_map(out, |gi, y| if y > 0.0 { gi * 0.5 / y } else { 0.0 }),
            ),
            Op::Abs(a) => self.accumulate(grads, a, g.zip_map(self.value(a), |gi, x| gi * sign(x))),
            Op::Square(a) => {
                self.accumulate(grads, a, g.zip_map(self.value(a), |gi, x| 2.0 * gi * x))
            }
            Op::Softmax(a) => {
                let mut d = g.zip_map(out, |gi, y| gi * y);
                for r in 0..d.rows() {
                    let dot: f64 = d.row(r).iter().sum();
                    let yr = out.row(r);
                    for (di, &yi) in d.row_mut(r).iter_mut().zip(yr) {
                        *di -= yi * dot;
                    }
                }
                self.accumulate(grads, a, d);
            }
            Op::LayerNorm(a, eps) => {
                let x = self.value(a);
                let n = x.cols() as f64;
                let mut d = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let xr = x.row(r);
                    let mean = xr.iter().sum::<f64>() / n;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let rstd = 1.0 / (var + eps).sqrt();
                    let gr = g.row(r);
                    let yr = out.row(r);
                    let gmean = gr.iter().sum::<f64>() / n;
                    let gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((di, &gi), &yi) in d.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *di = rstd * (gi - gmean - yi * gy);
                    }
                }
                self.accumulate(grads, a, d);
            }
            Op::ConcatCols(ref parts) => {
                let mut off = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    if self.ng(p) {
                        let mut gp = Matrix::zeros(g.rows(), cols);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                        }
                        self.accumulate(grads, p, gp);
                    }
                    off += cols;
                }
            }
            Op::ConcatRows(ref parts) => {
                let mut off = 0;
                for &p in parts {
                    let m = self.value(p);
                    let n = m.len();
                    if self.ng(p) {
                        let gp = Matrix::from_vec(m.rows(), m.cols(), g.data()[off..off + n].to_vec());
                        self.accumulate(grads, p, gp);
                    }
                    off += n;
                }
            }
            Op::SliceCols(a, start) => {
                let am = self.value(a);
                let mut ga = Matrix::zeros(am.rows(), am.cols());
                let len = g.cols();
                for r in 0..g.rows() {
                    ga.row_mut(r)[start..start + len].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, a, ga);
            }
            Op::SelectCols(a, ref idx) => {
                let am = self.value(a);
                let mut ga = Matrix::zeros(am.rows(), am.cols());
                for r in 0..g.rows() {
                    let gr = g.row(r);
                    let dst = ga.row_mut(r);
                    for (&i, &v) in idx.iter().zip(gr) {
                        dst[i] += v;
                    }
                }
                self.accumulate(grads, a, ga);
            }
            Op::SelectRows(a, ref idx) => {
                let am = self.value(a);
                let mut ga = Matrix::zeros(am.rows(), am.cols());
                for (k, &i) in idx.iter().enumerate() {
                    for (d, v) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                        *d += v;
                    }
                }
                self.accumulate(grads, a, ga);
            }
            Op::CumsumExclusive(a) => {
                // d a[k] = Σ_{i>k} g[i]
                let mut ga = Matrix::zeros(g.rows(), g.cols());
                for r in (0..g.rows().saturating_sub(1)).rev() {
                    for c in 0..g.cols() {
                        let v = ga.get(r + 1, c) + g.get(r + 1, c);
                        ga.set(r, c, v);
                    }
                }
                self.accumulate(grads, a, ga);
            }
            Op::Minimum(a, b) => {
                let (am, bm) = (self.value(a), self.value(b));
                if self.ng(a) {
                    let ga = Matrix::from_vec(
                        g.rows(),
                        g.cols(),
                        g.data()
                            .iter()
                            .zip(am.data().iter().zip(bm.data()))
                            .map(|(&gi, (&x, &y))| if x <= y { gi } else { 0.0 })
                            .collect(),
                    );
                    self.accumulate(grads, a, ga);
                }
                if self.ng(b) {
                    let gb = Matrix::from_vec(
                        g.rows(),
                        g.cols(),
                        g.data()
                            .iter()
                            .zip(am.data().iter().zip(bm.data()))
                            .map(|(&gi, (&x, &y))| if x <= y { 0.0 } else { gi })
                            .collect(),
                    );
                    self.accumulate(grads, b, gb);
                }
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(a);
                self.accumulate(grads, a, Matrix::filled(r, c, g.data()[0]));
            }
            Op::Mean(a) => {
                let (r, c) = self.shape(a);
                let n = (r * c).max(1) as f64;
                self.accumulate(grads, a, Matrix::filled(r, c, g.data()[0] / n));
            }
            Op::MeanRows(a) => {
                let (r, c) = self.shape(a);
                let inv = 1.0 / r.max(1) as f64;
                let mut ga = Matrix::zeros(r, c);
                for i in 0..r {
                    for (d, v) in ga.row_mut(i).iter_mut().zip(g.data()) {
                        *d = v * inv;
                    }
                }
                self.accumulate(grads, a, ga);
            }
            Op::SumCols(a) => {
                let (r, c) = self.shape(a);
                let mut ga = Matrix::zeros(r, c);
                for i in 0..r {
                    let gi = g.data()[i];
                    for d in ga.row_mut(i) {
                        *d = gi;
                    }
                }
                self.accumulate(grads, a, ga);
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
