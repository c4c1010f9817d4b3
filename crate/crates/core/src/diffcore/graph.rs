//! Tape-based reverse-mode differentiation over rank-2 tensors.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and [`Graph::backward`] walks it once in reverse,
//! accumulating gradients additively wherever a value fans out.
//!
//! Nodes built only from constants never require a gradient and are skipped
//! during the backward sweep.

use super::tensor::{gemm_acc, gemm_tn_acc, Tensor};
use super::{ParamId, ParamStore, Scalar, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Logistic(Var),
    Gelu(Var),
    Relu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows(Var),
    L2NormalizeRows(Var, f64),
    ColMean(Var),
    ColVar(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
    /// Auxiliary forward results kept for the backward pass (attention
    /// probabilities, normalization scales).
    saved: Vec<T>,
}

/// Gradients produced by [`Graph::backward`], indexed by parameter id.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }

    /// Wraps per-parameter gradients given in parameter-id order.
    pub fn from_vec(grads: Vec<Tensor<T>>) -> Self {
        Self { grads }
    }

    pub fn into_vec(self) -> Vec<Tensor<T>> {
        self.grads
    }

    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self {
            grads: store
                .iter()
                .map(|p| Tensor::zeros(p.value.rows(), p.value.cols()))
                .collect(),
        }
    }
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn logistic<T: Scalar>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

fn std_normal_cdf<T: Scalar>(x: T) -> T {
    T::from_f64(0.5) * (T::ONE + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn std_normal_pdf<T: Scalar>(x: T) -> T {
    T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt()) * (T::from_f64(-0.5) * x * x).exp()
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op, saved: Vec<T>, name: &'static str) -> Result<Var, TensorError> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite(name));
        }
        let requires_grad = match &op {
            Op::Constant => false,
            Op::Param(_) => true,
            other => inputs_of(other).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            saved,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var, TensorError> {
        self.push(value, Op::Constant, Vec::new(), "constant")
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var, TensorError> {
        self.push(store.get(id).value.clone(), Op::Param(id), Vec::new(), "param")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = super::tensor::matmul(self.value(a), self.value(b))?;
        self.push(out, Op::MatMul(a, b), Vec::new(), "matmul")
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(mismatch("matmul_nt", av, bv));
        }
        let out = super::tensor::matmul(av, &bv.transpose())?;
        self.push(out, Op::MatMulNt(a, b), Vec::new(), "matmul_nt")
    }

    fn zip_same(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch(name, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::matrix(av.rows(), av.cols(), data)?;
        self.push(out, op, Vec::new(), name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    fn row_broadcast(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(mismatch(name, av, bv));
        }
        let row = bv.data();
        let mut out = av.clone();
        for i in 0..out.rows() {
            for (o, &r) in out.row_mut(i).iter_mut().zip(row) {
                *o = f(*o, r);
            }
        }
        self.push(out, op, Vec::new(), name)
    }

    /// `a (n x m) + b (1 x m)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.row_broadcast(a, b, Op::AddRow(a, b), "add_row", |x, y| x + y)
    }

    /// `a (n x m) * b (1 x m)` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.row_broadcast(a, b, Op::MulRow(a, b), "mul_row", |x, y| x * y)
    }

    /// `a (n x m) * c (n x 1)` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var, TensorError> {
        let (av, cv) = (self.value(a), self.value(c));
        if cv.cols() != 1 || cv.rows() != av.rows() {
            return Err(mismatch("mul_col", av, cv));
        }
        let mut out = av.clone();
        for i in 0..out.rows() {
            let s = cv.data()[i];
            for o in out.row_mut(i) {
                *o *= s;
            }
        }
        self.push(out, Op::MulCol(a, c), Vec::new(), "mul_col")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, TensorError> {
        let st = T::from_f64(s);
        let out = self.value(a).map(|x| x * st);
        self.push(out, Op::Scale(a, s), Vec::new(), "scale")
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var, TensorError> {
        let st = T::from_f64(s);
        let out = self.value(a).map(|x| x + st);
        self.push(out, Op::AddScalar(a), Vec::new(), "add_scalar")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = self.value(*parts.first().ok_or(TensorError::EmptyInput("concat_cols"))?);
        let rows = first.rows();
        for p in parts {
            if self.value(*p).rows() != rows {
                return Err(mismatch("concat_cols", first, self.value(*p)));
            }
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(i));
            }
        }
        let out = Tensor::matrix(rows, total, data)?;
        self.push(out, Op::ConcatCols(parts.to_vec()), Vec::new(), "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = self.value(*parts.first().ok_or(TensorError::EmptyInput("concat_rows"))?);
        let cols = first.cols();
        for p in parts {
            if self.value(*p).cols() != cols {
                return Err(mismatch("concat_rows", first, self.value(*p)));
            }
        }
        let total: usize = parts.iter().map(|p| self.value(*p).rows()).sum();
        let mut data = Vec::with_capacity(total * cols);
        for p in parts {
            data.extend_from_slice(self.value(*p).data());
        }
        let out = Tensor::matrix(total, cols, data)?;
        self.push(out, Op::ConcatRows(parts.to_vec()), Vec::new(), "concat_rows")
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let av = self.value(a);
        if len == 0 || start + len > av.rows() {
            return Err(TensorError::OutOfRange {
                op: "slice_rows",
                start,
                len,
                size: av.rows(),
            });
        }
        let c = av.cols();
        let out = Tensor::matrix(len, c, av.data()[start * c..(start + len) * c].to_vec())?;
        self.push(out, Op::SliceRows(a, start), Vec::new(), "slice_rows")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let av = self.value(a);
        if len == 0 || start + len > av.cols() {
            return Err(TensorError::OutOfRange {
                op: "slice_cols",
                start,
                len,
                size: av.cols(),
            });
        }
        let mut data = Vec::with_capacity(av.rows() * len);
        for i in 0..av.rows() {
            data.extend_from_slice(&av.row(i)[start..start + len]);
        }
        let out = Tensor::matrix(av.rows(), len, data)?;
        self.push(out, Op::SliceCols(a, start), Vec::new(), "slice_cols")
    }

    pub fn logistic(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).map(logistic);
        self.push(out, Op::Logistic(a), Vec::new(), "logistic")
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).map(|x| x * std_normal_cdf(x));
        self.push(out, Op::Gelu(a), Vec::new(), "gelu")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).map(|x| if x > T::ZERO { x } else { T::ZERO });
        self.push(out, Op::Relu(a), Vec::new(), "relu")
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            softmax_in_place(out.row_mut(i));
        }
        self.push(out, Op::SoftmaxRows(a), Vec::new(), "softmax_rows")
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let max = row.iter().copied().fold(row[0], T::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        self.push(out, Op::LogSoftmaxRows(a), Vec::new(), "log_softmax_rows")
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)` without affine
    /// terms.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Result<Var, TensorError> {
        let mut out = self.value(a).clone();
        let n = T::from_f64(out.cols() as f64);
        let eps_t = T::from_f64(eps);
        let mut inv_std = Vec::with_capacity(out.rows());
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
            let inv = T::ONE / (var + eps_t).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * inv;
            }
            inv_std.push(inv);
        }
        self.push(out, Op::LayerNormRows(a), inv_std, "layer_norm_rows")
    }

    /// `x / max(||x||_2, eps)` per row.
    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Result<Var, TensorError> {
        let av = self.value(a);
        let eps_t = T::from_f64(eps);
        let mut out = av.clone();
        let mut norms = Vec::with_capacity(av.rows());
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps_t);
            for v in row.iter_mut() {
                *v = *v / norm;
            }
            norms.push(norm);
        }
        self.push(out, Op::L2NormalizeRows(a, eps), norms, "l2_normalize_rows")
    }

    pub fn col_mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let av = self.value(a);
        let n = T::from_f64(av.rows() as f64);
        let mut mean = vec![T::ZERO; av.cols()];
        for i in 0..av.rows() {
            for (m, &x) in mean.iter_mut().zip(av.row(i)) {
                *m += x;
            }
        }
        for m in &mut mean {
            *m = *m / n;
        }
        let out = Tensor::matrix(1, av.cols(), mean)?;
        self.push(out, Op::ColMean(a), Vec::new(), "col_mean")
    }

    /// Population variance of each column, shape `1 x m`.
    pub fn col_var(&mut self, a: Var) -> Result<Var, TensorError> {
        let av = self.value(a);
        let (rows, cols) = (av.rows(), av.cols());
        let n = T::from_f64(rows as f64);
        let mut mean = vec![T::ZERO; cols];
        for i in 0..rows {
            for (m, &x) in mean.iter_mut().zip(av.row(i)) {
                *m += x;
            }
        }
        for m in &mut mean {
            *m = *m / n;
        }
        let mut var = vec![T::ZERO; cols];
        for i in 0..rows {
            for ((v, &x), &m) in var.iter_mut().zip(av.row(i)).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        for v in &mut var {
            *v = *v / n;
        }
        let out = Tensor::matrix(1, cols, var)?;
        self.push(out, Op::ColVar(a), mean, "col_var")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.value(a).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(a), Vec::new(), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let av = self.value(a);
        let s = av.data().iter().copied().sum::<T>() / T::from_f64(av.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(a), Vec::new(), "mean")
    }

    pub fn row_sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let av = self.value(a);
        let data = (0..av.rows()).map(|i| av.row(i).iter().copied().sum::<T>()).collect();
        let out = Tensor::matrix(av.rows(), 1, data)?;
        self.push(out, Op::RowSum(a), Vec::new(), "row_sum")
    }

    /// Multi-head scaled dot-product self-attention over short sequences.
    ///
    /// Inputs are `(seq_len * batch) x model_dim` in slot-major layout: token
    /// `s` of sample `b` lives at row `s * batch + b`. Each sample attends only
    /// over its own `seq_len` tokens.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq_len: usize, heads: usize) -> Result<Var, TensorError> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() {
            return Err(mismatch("attention", qv, kv));
        }
        let (rows, dim) = (qv.rows(), qv.cols());
        if seq_len == 0 || rows % seq_len != 0 || heads == 0 || dim % heads != 0 {
            return Err(TensorError::InvalidAttention {
                rows,
                dim,
                seq_len,
                heads,
            });
        }
        let batch = rows / seq_len;
        let hd = dim / heads;
        let scale = T::from_f64(1.0 / (hd as f64).sqrt());
        let mut out = Tensor::zeros(rows, dim);
        // probabilities laid out [batch][head][s_q][s_k]
        let mut probs = vec![T::ZERO; batch * heads * seq_len * seq_len];
        let mut scores = vec![T::ZERO; seq_len];
        for b in 0..batch {
            for h in 0..heads {
                let cols = h * hd..(h + 1) * hd;
                for sq in 0..seq_len {
                    let qrow = &qv.row(sq * batch + b)[cols.clone()];
                    for (sk, sc) in scores.iter_mut().enumerate() {
                        let krow = &kv.row(sk * batch + b)[cols.clone()];
                        *sc = super::tensor::dot(qrow, krow) * scale;
                    }
                    softmax_in_place(&mut scores);
                    let base = ((b * heads + h) * seq_len + sq) * seq_len;
                    probs[base..base + seq_len].copy_from_slice(&scores);
                    let orow = &mut out.row_mut(sq * batch + b)[cols.clone()];
                    for (sk, &p) in scores.iter().enumerate() {
                        let vrow = &vv.row(sk * batch + b)[cols.clone()];
                        for (o, &x) in orow.iter_mut().zip(vrow) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                seq_len,
                heads,
            },
            probs,
            "attention",
        )
    }

    /// Reverse sweep from a scalar `loss`. Parameters that the loss does not
    /// depend on receive zero gradients.
    pub fn backward(&self, loss: Var, store: &ParamStore<T>) -> Result<Gradients<T>, TensorError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(TensorError::Disconnected);
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(lv.rows(), lv.cols(), T::ONE));
        let mut out = Gradients::zeros_like(store);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Param(id) = node.op {
                out.grads[id.0].add_assign(&g);
                continue;
            }
            for (input, contribution) in self.input_grads(node, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(out)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn input_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let y = &node.value;
        let mut res = Vec::new();
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                if self.wants(*a) {
                    let mut da = Tensor::zeros(n, k);
                    gemm_acc(g.data(), bv.transpose().data(), da.data_mut(), n, m, k);
                    res.push((*a, da));
                }
                if self.wants(*b) {
                    let mut db = Tensor::zeros(k, m);
                    gemm_tn_acc(av.data(), g.data(), db.data_mut(), n, k, m);
                    res.push((*b, db));
                }
            }
            Op::MatMulNt(a, b) => {
                // y = a b^T, a: n x k, b: m x k, g: n x m
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.rows());
                if self.wants(*a) {
                    let mut da = Tensor::zeros(n, k);
                    gemm_acc(g.data(), bv.data(), da.data_mut(), n, m, k);
                    res.push((*a, da));
                }
                if self.wants(*b) {
                    let mut db = Tensor::zeros(m, k);
                    gemm_tn_acc(g.data(), av.data(), db.data_mut(), n, m, k);
                    res.push((*b, db));
                }
            }
            Op::Add(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.map(|x| -x)));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    res.push((*a, elementwise(g, bv, |x, y| x * y)));
                }
                if self.wants(*b) {
                    res.push((*b, elementwise(g, av, |x, y| x * y)));
                }
            }
            Op::AddRow(a, b) => {
                res.push((*a, g.clone()));
                if self.wants(*b) {
                    res.push((*b, column_sums(g)));
                }
            }
            Op::MulRow(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let mut da = g.clone();
                    for i in 0..da.rows() {
                        for (d, &r) in da.row_mut(i).iter_mut().zip(bv.data()) {
                            *d *= r;
                        }
                    }
                    res.push((*a, da));
                }
                if self.wants(*b) {
                    res.push((*b, column_sums(&elementwise(g, av, |x, y| x * y))));
                }
            }
            Op::MulCol(a, c) => {
                let (av, cv) = (self.value(*a), self.value(*c));
                if self.wants(*a) {
                    let mut da = g.clone();
                    for i in 0..da.rows() {
                        let s = cv.data()[i];
                        for d in da.row_mut(i) {
                            *d *= s;
                        }
                    }
                    res.push((*a, da));
                }
                if self.wants(*c) {
                    let data = (0..av.rows())
                        .map(|i| super::tensor::dot(g.row(i), av.row(i)))
                        .collect();
                    res.push((*c, Tensor::matrix(av.rows(), 1, data).expect("shape")));
                }
            }
            Op::Scale(a, s) => {
                let st = T::from_f64(*s);
                res.push((*a, g.map(|x| x * st)));
            }
            Op::AddScalar(a) => res.push((*a, g.clone())),
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.wants(*p) {
                        let mut data = Vec::with_capacity(g.rows() * w);
                        for i in 0..g.rows() {
                            data.extend_from_slice(&g.row(i)[offset..offset + w]);
                        }
                        res.push((*p, Tensor::matrix(g.rows(), w, data).expect("shape")));
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                let c = g.cols();
                for p in parts {
                    let r = self.value(*p).rows();
                    if self.wants(*p) {
                        let data = g.data()[offset * c..(offset + r) * c].to_vec();
                        res.push((*p, Tensor::matrix(r, c, data).expect("shape")));
                    }
                    offset += r;
                }
            }
            Op::SliceRows(a, start) => {
                let av = self.value(*a);
                let mut da = Tensor::zeros(av.rows(), av.cols());
                let c = av.cols();
                da.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                res.push((*a, da));
            }
            Op::SliceCols(a, start) => {
                let av = self.value(*a);
                let mut da = Tensor::zeros(av.rows(), av.cols());
                for i in 0..g.rows() {
                    da.row_mut(i)[*start..start + g.cols()].copy_from_slice(g.row(i));
                }
                res.push((*a, da));
            }
            Op::Logistic(a) => {
                res.push((*a, elementwise(g, y, |gv, s| gv * s * (T::ONE - s))));
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                res.push((
                    *a,
                    elementwise(g, x, |gv, xv| gv * (std_normal_cdf(xv) + xv * std_normal_pdf(xv))),
                ));
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                res.push((*a, elementwise(g, x, |gv, xv| if xv > T::ZERO { gv } else { T::ZERO })));
            }
            Op::SoftmaxRows(a) => {
                let mut da = g.clone();
                for i in 0..da.rows() {
                    let yr = y.row(i);
                    let inner = super::tensor::dot(g.row(i), yr);
                    for (d, &p) in da.row_mut(i).iter_mut().zip(yr) {
                        *d = p * (*d - inner);
                    }
                }
                res.push((*a, da));
            }
            Op::LogSoftmaxRows(a) => {
                let mut da = g.clone();
                for i in 0..da.rows() {
                    let total = g.row(i).iter().copied().sum::<T>();
                    for (d, &ly) in da.row_mut(i).iter_mut().zip(y.row(i)) {
                        *d -= ly.exp() * total;
                    }
                }
                res.push((*a, da));
            }
            Op::LayerNormRows(a) => {
                let n = T::from_f64(y.cols() as f64);
                let mut da = g.clone();
                for i in 0..da.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let gm = gr.iter().copied().sum::<T>() / n;
                    let gym = super::tensor::dot(gr, yr) / n;
                    let inv = node.saved[i];
                    for ((d, &gv), &yv) in da.row_mut(i).iter_mut().zip(gr).zip(yr) {
                        *d = inv * (gv - gm - yv * gym);
                    }
                }
                res.push((*a, da));
            }
            Op::L2NormalizeRows(a, eps) => {
                let eps_t = T::from_f64(*eps);
                let mut da = g.clone();
                for i in 0..da.rows() {
                    let norm = node.saved[i];
                    let yr = y.row(i);
                    let clamped = !(norm > eps_t);
                    let inner = if clamped {
                        T::ZERO
                    } else {
                        super::tensor::dot(g.row(i), yr)
                    };
                    for (d, &yv) in da.row_mut(i).iter_mut().zip(yr) {
                        *d = (*d - yv * inner) / norm;
                    }
                }
                res.push((*a, da));
            }
            Op::ColMean(a) => {
                let av = self.value(*a);
                let n = T::from_f64(av.rows() as f64);
                let mut da = Tensor::zeros(av.rows(), av.cols());
                for i in 0..av.rows() {
                    for (d, &gv) in da.row_mut(i).iter_mut().zip(g.data()) {
                        *d = gv / n;
                    }
                }
                res.push((*a, da));
            }
            Op::ColVar(a) => {
                let av = self.value(*a);
                let n = T::from_f64(av.rows() as f64);
                let two = T::from_f64(2.0);
                let mean = &node.saved;
                let mut da = Tensor::zeros(av.rows(), av.cols());
                for i in 0..av.rows() {
                    let xr = av.row(i);
                    for (j, d) in da.row_mut(i).iter_mut().enumerate() {
                        *d = g.data()[j] * two * (xr[j] - mean[j]) / n;
                    }
                }
                res.push((*a, da));
            }
            Op::Sum(a) => {
                let av = self.value(*a);
                res.push((*a, Tensor::filled(av.rows(), av.cols(), g.item())));
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let v = g.item() / T::from_f64(av.len() as f64);
                res.push((*a, Tensor::filled(av.rows(), av.cols(), v)));
            }
            Op::RowSum(a) => {
                let av = self.value(*a);
                let mut da = Tensor::zeros(av.rows(), av.cols());
                for i in 0..av.rows() {
                    let gv = g.data()[i];
                    for d in da.row_mut(i) {
                        *d = gv;
                    }
                }
                res.push((*a, da));
            }
            Op::Attention {
                q,
                k,
                v,
                seq_len,
                heads,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (rows, dim) = (qv.rows(), qv.cols());
                let (seq_len, heads) = (*seq_len, *heads);
                let batch = rows / seq_len;
                let hd = dim / heads;
                let scale = T::from_f64(1.0 / (hd as f64).sqrt());
                let mut dq = Tensor::zeros(rows, dim);
                let mut dk = Tensor::zeros(rows, dim);
                let mut dv = Tensor::zeros(rows, dim);
                let mut dp = vec![T::ZERO; seq_len];
                for b in 0..batch {
                    for h in 0..heads {
                        let cols = h * hd..(h + 1) * hd;
                        for sq in 0..seq_len {
                            let base = ((b * heads + h) * seq_len + sq) * seq_len;
                            let p = &node.saved[base..base + seq_len];
                            let grow = &g.row(sq * batch + b)[cols.clone()];
                            for sk in 0..seq_len {
                                let vrow = &vv.row(sk * batch + b)[cols.clone()];
                                dp[sk] = super::tensor::dot(grow, vrow);
                                let dvrow = &mut dv.row_mut(sk * batch + b)[cols.clone()];
                                for (d, &gv) in dvrow.iter_mut().zip(grow) {
                                    *d += p[sk] * gv;
                                }
                            }
                            let inner = super::tensor::dot(&dp, p);
                            for sk in 0..seq_len {
                                let ds = p[sk] * (dp[sk] - inner) * scale;
                                let krow = &kv.row(sk * batch + b)[cols.clone()];
                                let dqrow = &mut dq.row_mut(sq * batch + b)[cols.clone()];
                                for (d, &kx) in dqrow.iter_mut().zip(krow) {
                                    *d += ds * kx;
                                }
                                let qrow = &qv.row(sq * batch + b)[cols.clone()];
                                let dkrow = &mut dk.row_mut(sk * batch + b)[cols.clone()];
                                for (d, &qx) in dkrow.iter_mut().zip(qrow) {
                                    *d += ds * qx;
                                }
                            }
                        }
                    }
                }
                res.push((*q, dq));
                res.push((*k, dk));
                res.push((*v, dv));
            }
        }
        res
    }
}

fn inputs_of(op: &Op) -> Vec<Var> {
    match op {
        Op::Constant | Op::Param(_) => Vec::new(),
        Op::MatMul(a, b)
        | Op::MatMulNt(a, b)
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::AddRow(a, b)
        | Op::MulRow(a, b)
        | Op::MulCol(a, b) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::SliceRows(a, _)
        | Op::SliceCols(a, _)
        | Op::Logistic(a)
        | Op::Gelu(a)
        | Op::Relu(a)
        | Op::SoftmaxRows(a)
        | Op::LogSoftmaxRows(a)
        | Op::LayerNormRows(a)
        | Op::L2NormalizeRows(a, _)
        | Op::ColMean(a)
        | Op::ColVar(a)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::RowSum(a) => vec![*a],
        Op::ConcatCols(parts) | Op::ConcatRows(parts) => parts.clone(),
        Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
    }
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(row[0], T::max);
    let mut total = T::ZERO;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x = *x / total;
    }
}

fn elementwise<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::matrix(a.rows(), a.cols(), data).expect("same shape")
}

fn column_sums<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let mut out = vec![T::ZERO; g.cols()];
    for i in 0..g.rows() {
        for (o, &x) in out.iter_mut().zip(g.row(i)) {
            *o += x;
        }
    }
    Tensor::matrix(1, g.cols(), out).expect("non-empty")
}
