//! Reverse-mode gradient tape.
//!
//! Every operation appends a node holding its forward value; `backward` walks
//! the tape in reverse and accumulates gradients only into nodes that depend
//! on a trainable parameter. All values are treated as matrices (see
//! [`Tensor::dims2`]); rank-1 parameters behave as row vectors.

use std::collections::HashMap;

use crate::error::{DiffError, Result};
use crate::params::{Gradients, ParamStore};
use crate::tensor::{Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Softmax(Var),
    LogSumExp(Var),
    LayerNorm(Var, T),
    Gelu(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var, T),
    Square(Var),
    MeanRows(Var),
    Sum(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    L2Normalize(Var),
    AngularMargin { x: Var, col: usize, margin: T },
    Pick(Var, usize),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<String>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    bound: HashMap<String, Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;
const MARGIN_CLAMP: f64 = 1e-7;

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes[v.0].value.shape().to_vec()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// First element of a node's value, for scalar losses.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    /// A constant input; never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Binds a stored parameter, reusing the node if it was bound before.
    /// Frozen entries become constants.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = store.get(name)?.clone();
        let trainable = !store.is_frozen(name);
        let v = self.push(t, Op::Leaf, trainable);
        self.nodes[v.0].param = Some(name.to_string());
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// A free-standing trainable leaf reported under `name` in the gradients.
    pub fn leaf(&mut self, name: &str, t: Tensor<T>) -> Var {
        let v = self.push(t, Op::Leaf, true);
        self.nodes[v.0].param = Some(name.to_string());
        self.bound.insert(name.to_string(), v);
        v
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a * b^T`, the natural form for `[out, in]` weight matrices.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (br, bc) = self.dims(b);
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != k2 {
            let op = if trans_b { "matmul_t" } else { "matmul" };
            return Err(DiffError::shape(op, &self.shape_of(a), &self.shape_of(b)));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.nodes[a.0].value.data(),
            false,
            self.nodes[b.0].value.data(),
            trans_b,
            T::zero(),
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b, trans_b }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let t = self.nodes[x.0].value.transpose();
        let rg = self.rg(x);
        self.push(t, Op::Transpose(x), rg)
    }

    // ---- elementwise binary ----

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(DiffError::shape(op, &self.shape_of(a), &self.shape_of(b)));
        }
        Ok(da)
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let name = match op {
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            _ => "mul",
        };
        let (m, n) = self.same_shape(name, a, b)?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], data)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Sum of several same-shaped nodes.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars.split_first().ok_or(DiffError::Invalid {
            op: "add_all",
            msg: "empty input".into(),
        })?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    fn row_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (m, n) = self.dims(a);
        let (br, bc) = self.dims(b);
        if br != 1 || bc != n {
            return Err(DiffError::shape(op, &self.shape_of(a), &self.shape_of(b)));
        }
        Ok((m, n))
    }

    /// Adds row vector `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.row_broadcast("add_row", a, b)?;
        let bv = self.nodes[b.0].value.data();
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % n])
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], data)?, Op::AddRow(a, b), rg))
    }

    /// Multiplies every row of `a` elementwise by row vector `b`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.row_broadcast("mul_row", a, b)?;
        let bv = self.nodes[b.0].value.data();
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * bv[i % n])
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], data)?, Op::MulRow(a, b), rg))
    }

    // ---- elementwise unary ----

    fn map(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let (m, n) = self.dims(x);
        let data = self.nodes[x.0].value.data().iter().map(|&v| f(v)).collect();
        let rg = self.rg(x);
        self.push(Tensor::new(&[m, n], data).expect("same extents"), op, rg)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.map(x, Op::Scale(x, s), |v| v * s)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let (c, k) = (T::lit(GELU_C), T::lit(GELU_K));
        let half = T::lit(0.5);
        self.map(x, Op::Gelu(x), |v| {
            half * v * (T::one() + (c * (v + k * v * v * v)).tanh())
        })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu(x), |v| v.max(T::zero()))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, Op::Tanh(x), |v| v.tanh())
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, Op::Exp(x), |v| v.exp())
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.map(x, Op::Log(x), |v| v.ln())
    }

    /// `sqrt(max(x, 0) + eps)`.
    pub fn sqrt_eps(&mut self, x: Var, eps: T) -> Var {
        self.map(x, Op::Sqrt(x, eps), |v| (v.max(T::zero()) + eps).sqrt())
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(x, Op::Square(x), |v| v * v)
    }

    // ---- row-wise ----

    pub fn softmax(&mut self, x: Var) -> Var {
        let (m, n) = self.dims(x);
        let mut data = self.nodes[x.0].value.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let rg = self.rg(x);
        self.push(Tensor::new(&[m, n], data).expect("same extents"), Op::Softmax(x), rg)
    }

    /// Row-wise log-sum-exp, `[m, n] -> [m, 1]`.
    pub fn log_sum_exp(&mut self, x: Var) -> Var {
        let (m, n) = self.dims(x);
        let xs = self.nodes[x.0].value.data();
        let out: Vec<T> = xs.chunks(n).map(lse).collect();
        let rg = self.rg(x);
        self.push(Tensor::new(&[m, 1], out).expect("m rows"), Op::LogSumExp(x), rg)
    }

    /// Row-wise standardization without affine terms.
    pub fn layer_norm(&mut self, x: Var, eps: T) -> Var {
        let (m, n) = self.dims(x);
        let mut data = self.nodes[x.0].value.data().to_vec();
        for row in data.chunks_mut(n) {
            let (mean, inv) = row_stats(row, eps);
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(&[m, n], data).expect("same extents"), Op::LayerNorm(x, eps), rg)
    }

    /// Row-wise division by the L2 norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        let mut data = self.nodes[x.0].value.data().to_vec();
        for row in data.chunks_mut(n) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm == T::zero() || !norm.is_finite() {
                return Err(DiffError::ZeroNorm("l2_normalize"));
            }
            for v in row.iter_mut() {
                *v = *v / norm;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[m, n], data)?, Op::L2Normalize(x), rg))
    }

    /// Replaces element `col` of a `[1, c]` cosine row with `cos(acos(x) + margin)`.
    pub fn angular_margin(&mut self, x: Var, col: usize, margin: T) -> Result<Var> {
        let (m, n) = self.dims(x);
        if m != 1 || col >= n {
            return Err(DiffError::Invalid {
                op: "angular_margin",
                msg: format!("column {col} out of range for shape {:?}", self.shape_of(x)),
            });
        }
        let mut data = self.nodes[x.0].value.data().to_vec();
        let lim = T::one() - T::lit(MARGIN_CLAMP);
        let c = data[col].max(-lim).min(lim);
        data[col] = (c.acos() + margin).cos();
        if !data[col].is_finite() {
            return Err(DiffError::Invalid {
                op: "angular_margin",
                msg: "non-finite cosine".into(),
            });
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[1, n], data)?, Op::AngularMargin { x, col, margin }, rg))
    }

    // ---- reductions and reshaping ----

    /// Mean over rows, `[m, n] -> [1, n]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (m, n) = self.dims(x);
        let mut out = vec![T::zero(); n];
        for row in self.nodes[x.0].value.data().chunks(n) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = T::one() / T::lit(m as f64);
        out.iter_mut().for_each(|o| *o *= inv);
        let rg = self.rg(x);
        self.push(Tensor::row(out), Op::MeanRows(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.numel();
        let s = self.sum(x);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let m = xs
            .first()
            .map(|&v| self.dims(v).0)
            .ok_or(DiffError::Invalid {
                op: "concat_cols",
                msg: "empty input".into(),
            })?;
        for &v in xs {
            if self.dims(v).0 != m {
                return Err(DiffError::shape("concat_cols", &self.shape_of(xs[0]), &self.shape_of(v)));
            }
        }
        let n: usize = xs.iter().map(|&v| self.dims(v).1).sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for &v in xs {
                data.extend_from_slice(self.nodes[v.0].value.row_slice(i));
            }
        }
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(Tensor::new(&[m, n], data)?, Op::ConcatCols(xs.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let n = xs
            .first()
            .map(|&v| self.dims(v).1)
            .ok_or(DiffError::Invalid {
                op: "concat_rows",
                msg: "empty input".into(),
            })?;
        let mut data = Vec::new();
        let mut m = 0;
        for &v in xs {
            let (r, c) = self.dims(v);
            if c != n {
                return Err(DiffError::shape("concat_rows", &self.shape_of(xs[0]), &self.shape_of(v)));
            }
            m += r;
            data.extend_from_slice(self.nodes[v.0].value.data());
        }
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(Tensor::new(&[m, n], data)?, Op::ConcatRows(xs.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if len == 0 || start + len > n {
            return Err(DiffError::Invalid {
                op: "slice_cols",
                msg: format!("columns {start}..{} out of range for {:?}", start + len, self.shape_of(x)),
            });
        }
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&self.nodes[x.0].value.row_slice(i)[start..start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[m, len], data)?, Op::SliceCols(x, start), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if len == 0 || start + len > m {
            return Err(DiffError::Invalid {
                op: "slice_rows",
                msg: format!("rows {start}..{} out of range for {:?}", start + len, self.shape_of(x)),
            });
        }
        let data = self.nodes[x.0].value.data()[start * n..(start + len) * n].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[len, n], data)?, Op::SliceRows(x, start), rg))
    }

    /// Element at flat index `idx` as a `[1, 1]` node.
    pub fn pick(&mut self, x: Var, idx: usize) -> Result<Var> {
        let numel = self.nodes[x.0].value.numel();
        if idx >= numel {
            return Err(DiffError::Invalid {
                op: "pick",
                msg: format!("index {idx} out of range for {numel} elements"),
            });
        }
        let v = self.nodes[x.0].value.data()[idx];
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(v), Op::Pick(x, idx), rg))
    }

    // ---- composites ----

    /// Pairwise cosine similarity between rows of `a` and rows of `b`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let na = self.l2_normalize(a)?;
        let nb = self.l2_normalize(b)?;
        self.matmul_t(na, nb)
    }

    /// Column-wise (over rows) standard deviation, `[m, n] -> [1, n]`.
    pub fn std_rows(&mut self, x: Var, eps: T) -> Result<Var> {
        let mean = self.mean_rows(x);
        let neg = self.scale(mean, -T::one());
        let centered = self.add_row(x, neg)?;
        let sq = self.square(centered);
        let var = self.mean_rows(sq);
        Ok(self.sqrt_eps(var, eps))
    }

    // ---- backward ----

    /// Gradients of the scalar `loss` with respect to every trainable
    /// parameter bound in this graph. Bound parameters without a path to the
    /// loss get zero gradients; frozen ones get none.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(DiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        let mut out = Gradients::new();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    if let Some(name) = &node.param {
                        out.insert(name.clone(), Tensor::new(node.value.shape(), gy)?);
                    }
                }
                op => self.propagate(op, &node.value, &gy, &mut grads),
            }
        }
        for (name, v) in &self.bound {
            if self.nodes[v.0].requires_grad && out.get(name).is_none() {
                out.insert(name.clone(), Tensor::zeros(self.nodes[v.0].value.shape()));
            }
        }
        Ok(out)
    }

    fn propagate(&self, op: &Op<T>, y: &Tensor<T>, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let n = self.nodes[v.0].value.numel();
            let g = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
            f(g);
        };
        let ydata = y.data();
        let (ym, yn) = y.dims2();
        match *op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = self.dims(a);
                let n = yn;
                acc(a, &mut |g| {
                    T::gemm(m, n, k, T::one(), gy, false, val(b), !trans_b, T::one(), g);
                });
                acc(b, &mut |g| {
                    if trans_b {
                        T::gemm(n, m, k, T::one(), gy, true, val(a), false, T::one(), g);
                    } else {
                        T::gemm(k, m, n, T::one(), val(a), true, gy, false, T::one(), g);
                    }
                });
            }
            Op::Transpose(x) => acc(x, &mut |g| {
                // y is [ym, yn]; x is [yn, ym]
                for i in 0..ym {
                    for j in 0..yn {
                        g[j * ym + i] += gy[i * yn + j];
                    }
                }
            }),
            Op::Add(a, b) => {
                acc(a, &mut |g| add_into(g, gy));
                acc(b, &mut |g| add_into(g, gy));
            }
            Op::Sub(a, b) => {
                acc(a, &mut |g| add_into(g, gy));
                acc(b, &mut |g| g.iter_mut().zip(gy).for_each(|(g, &d)| *g -= d));
            }
            Op::Mul(a, b) => {
                acc(a, &mut |g| {
                    for ((g, &d), &o) in g.iter_mut().zip(gy).zip(val(b)) {
                        *g += d * o;
                    }
                });
                acc(b, &mut |g| {
                    for ((g, &d), &o) in g.iter_mut().zip(gy).zip(val(a)) {
                        *g += d * o;
                    }
                });
            }
            Op::AddRow(a, b) => {
                acc(a, &mut |g| add_into(g, gy));
                acc(b, &mut |g| {
                    for row in gy.chunks(yn) {
                        add_into(g, row);
                    }
                });
            }
            Op::MulRow(a, b) => {
                let bv = val(b);
                acc(a, &mut |g| {
                    for (i, (g, &d)) in g.iter_mut().zip(gy).enumerate() {
                        *g += d * bv[i % yn];
                    }
                });
                let av = val(a);
                acc(b, &mut |g| {
                    for (i, &d) in gy.iter().enumerate() {
                        g[i % yn] += d * av[i];
                    }
                });
            }
            Op::Scale(x, s) => acc(x, &mut |g| {
                g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d * s);
            }),
            Op::Softmax(x) => acc(x, &mut |g| {
                for ((g, d), y) in g.chunks_mut(yn).zip(gy.chunks(yn)).zip(ydata.chunks(yn)) {
                    let dot: T = d.iter().zip(y).map(|(&a, &b)| a * b).sum();
                    for ((g, &d), &y) in g.iter_mut().zip(d).zip(y) {
                        *g += y * (d - dot);
                    }
                }
            }),
            Op::LogSumExp(x) => {
                let (_, n) = self.dims(x);
                acc(x, &mut |g| {
                    for ((g, xr), (&d, &l)) in g.chunks_mut(n).zip(val(x).chunks(n)).zip(gy.iter().zip(ydata)) {
                        for (g, &xv) in g.iter_mut().zip(xr) {
                            *g += d * (xv - l).exp();
                        }
                    }
                });
            }
            Op::LayerNorm(x, eps) => acc(x, &mut |g| {
                let nf = T::lit(yn as f64);
                for ((g, xr), (d, yr)) in g
                    .chunks_mut(yn)
                    .zip(val(x).chunks(yn))
                    .zip(gy.chunks(yn).zip(ydata.chunks(yn)))
                {
                    let (_, inv) = row_stats(xr, eps);
                    let mean_d = d.iter().copied().sum::<T>() / nf;
                    let mean_dy: T = d.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / nf;
                    for ((g, &d), &y) in g.iter_mut().zip(d).zip(yr) {
                        *g += inv * (d - mean_d - y * mean_dy);
                    }
                }
            }),
            Op::Gelu(x) => acc(x, &mut |g| {
                let (c, k, half) = (T::lit(GELU_C), T::lit(GELU_K), T::lit(0.5));
                let three = T::lit(3.0);
                for ((g, &d), &v) in g.iter_mut().zip(gy).zip(val(x)) {
                    let t = (c * (v + k * v * v * v)).tanh();
                    let dt = (T::one() - t * t) * c * (T::one() + three * k * v * v);
                    *g += d * (half * (T::one() + t) + half * v * dt);
                }
            }),
            Op::Relu(x) => acc(x, &mut |g| {
                for ((g, &d), &v) in g.iter_mut().zip(gy).zip(val(x)) {
                    if v > T::zero() {
                        *g += d;
                    }
                }
            }),
            Op::Tanh(x) => acc(x, &mut |g| {
                for ((g, &d), &y) in g.iter_mut().zip(gy).zip(ydata) {
                    *g += d * (T::one() - y * y);
                }
            }),
            Op::Exp(x) => acc(x, &mut |g| {
                for ((g, &d), &y) in g.iter_mut().zip(gy).zip(ydata) {
                    *g += d * y;
                }
            }),
            Op::Log(x) => acc(x, &mut |g| {
                for ((g, &d), &v) in g.iter_mut().zip(gy).zip(val(x)) {
                    *g += d / v;
                }
            }),
            Op::Sqrt(x, _) => acc(x, &mut |g| {
                let half = T::lit(0.5);
                for (((g, &d), &v), &y) in g.iter_mut().zip(gy).zip(val(x)).zip(ydata) {
                    if v > T::zero() {
                        *g += d * half / y;
                    }
                }
            }),
            Op::Square(x) => acc(x, &mut |g| {
                let two = T::lit(2.0);
                for ((g, &d), &v) in g.iter_mut().zip(gy).zip(val(x)) {
                    *g += d * two * v;
                }
            }),
            Op::MeanRows(x) => {
                let (m, n) = self.dims(x);
                let inv = T::one() / T::lit(m as f64);
                acc(x, &mut |g| {
                    for row in g.chunks_mut(n) {
                        for (g, &d) in row.iter_mut().zip(gy) {
                            *g += d * inv;
                        }
                    }
                });
            }
            Op::Sum(x) => acc(x, &mut |g| g.iter_mut().for_each(|g| *g += gy[0])),
            Op::ConcatCols(ref xs) => {
                let mut offset = 0;
                for &v in xs {
                    let (m, n) = self.dims(v);
                    acc(v, &mut |g| {
                        for i in 0..m {
                            add_into(&mut g[i * n..(i + 1) * n], &gy[i * yn + offset..i * yn + offset + n]);
                        }
                    });
                    offset += n;
                }
            }
            Op::ConcatRows(ref xs) => {
                let mut offset = 0;
                for &v in xs {
                    let len = self.nodes[v.0].value.numel();
                    acc(v, &mut |g| add_into(g, &gy[offset..offset + len]));
                    offset += len;
                }
            }
            Op::SliceCols(x, start) => {
                let (_, n) = self.dims(x);
                acc(x, &mut |g| {
                    for i in 0..ym {
                        add_into(&mut g[i * n + start..i * n + start + yn], &gy[i * yn..(i + 1) * yn]);
                    }
                });
            }
            Op::SliceRows(x, start) => acc(x, &mut |g| {
                add_into(&mut g[start * yn..(start + ym) * yn], gy);
            }),
            Op::L2Normalize(x) => acc(x, &mut |g| {
                for ((g, xr), (d, yr)) in g
                    .chunks_mut(yn)
                    .zip(val(x).chunks(yn))
                    .zip(gy.chunks(yn).zip(ydata.chunks(yn)))
                {
                    let norm = xr.iter().map(|&v| v * v).sum::<T>().sqrt();
                    let dot: T = d.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((g, &d), &y) in g.iter_mut().zip(d).zip(yr) {
                        *g += (d - y * dot) / norm;
                    }
                }
            }),
            Op::AngularMargin { x, col, margin } => acc(x, &mut |g| {
                let lim = T::one() - T::lit(MARGIN_CLAMP);
                for (j, (g, &d)) in g.iter_mut().zip(gy).enumerate() {
                    if j != col {
                        *g += d;
                        continue;
                    }
                    let c = val(x)[j];
                    if c.abs() <= lim {
                        let theta = c.acos();
                        *g += d * (theta + margin).sin() / theta.sin();
                    }
                }
            }),
            Op::Pick(x, idx) => acc(x, &mut |g| g[idx] += gy[0]),
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn row_stats<T: Real>(row: &[T], eps: T) -> (T, T) {
    let n = T::lit(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, T::one() / (var + eps).sqrt())
}

fn lse<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

/// Numerically stable in-place softmax.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
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

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(3));
        let x = g.constant(t(&[3, 1], &[1.0, -2.0, 0.5]));
        let y = g.matmul(i, x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2], &[0.0, 0.0]));
        let y = g.softmax(x);
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn orthogonal_cosine_is_zero() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1, 2], &[1.0, 0.0]));
        let b = g.constant(t(&[1, 2], &[0.0, 1.0]));
        let c = g.cosine_similarity(a, b).unwrap();
        assert_eq!(g.scalar(c), 0.0);
    }

    #[test]
    fn linear_map_gradient() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::<f64>::zeros(&[2, 2])).unwrap();
        let mut g = Graph::new();
        let w = g.param(&store, "w").unwrap();
        let x = g.constant(t(&[2, 1], &[1.0, 1.0]));
        let y = g.matmul(w, x).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("w").unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn detached_param_gets_zero_gradient() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::<f64>::full(&[3], 2.0)).unwrap();
        store.insert("q", Tensor::<f64>::full(&[1, 1], 1.0)).unwrap();
        let mut g = Graph::new();
        let _p = g.param(&store, "p").unwrap();
        let q = g.param(&store, "q").unwrap();
        let loss = g.square(q);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("p").unwrap().data(), &[0.0; 3]);
        assert_eq!(grads.get("q").unwrap().data(), &[2.0]);
    }

    #[test]
    fn frozen_param_gets_no_gradient_entry() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::<f64>::full(&[1, 1], 3.0)).unwrap();
        store.freeze("w").unwrap();
        let mut g = Graph::new();
        let w = g.param(&store, "w").unwrap();
        let loss = g.square(w);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get("w").is_none());
        assert!(grads.is_empty());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(x), Err(DiffError::NonScalarLoss(_))));
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 5]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
    }

    #[test]
    fn zero_row_normalization_fails() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(g.l2_normalize(a), Err(DiffError::ZeroNorm(_))));
    }
}
