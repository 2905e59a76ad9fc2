//! Reverse-mode differentiation over a linear tape of dense matrix ops.
//!
//! Every node holds its forward value; `backward` replays the tape in reverse
//! and accumulates vector-Jacobian products in place. Accumulation order is
//! fixed by node order, so repeated runs are bit-identical.

use std::borrow::Cow;

use super::kernels::{self, lp_pool_partial, lp_pool_slice};
use super::{NumericsError, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Weight layout for [`Tape::variational_linear`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightLayout {
    /// Weight is `out x in`; the product is `x . W^T`.
    OutIn,
    /// Weight is `in x out`; the product is `x . W`.
    InOut,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Pow(Var, f64),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Sum(Var),
    GatherRows(Var, Vec<usize>),
    SumRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    NormalizeRows(Var, Vec<f64>),
    SoftmaxRows(Var, f64),
    LpPoolColumns(Var, f64),
    MaxPoolColumns(Var, Vec<usize>),
    SoftmaxXent {
        logits: Var,
        target: usize,
        scale: f64,
        probs: Vec<f64>,
    },
    VariationalLinear {
        x: Var,
        theta: Var,
        logvar: Var,
        layout: WeightLayout,
        noise: Tensor,
        variance: Tensor,
        spread: Vec<f64>,
    },
}

/// Recorded computation. Leaves may borrow their values.
#[derive(Default)]
pub struct Tape<'a> {
    values: Vec<Cow<'a, Tensor>>,
    ops: Vec<Op>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for `v`, or zeros of `shape` when the loss does not depend on it.
    pub fn take_or_zeros(&mut self, v: Var, shape: &[usize]) -> Tensor {
        self.grads[v.0].take().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

/// Log-variances at or below this map to an exactly zero variance.
pub const LOGVAR_ZERO_FLOOR: f64 = -500.0;

pub(crate) fn variance_of(logvar: f64) -> f64 {
    if logvar <= LOGVAR_ZERO_FLOOR {
        0.0
    } else {
        logvar.exp()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn add_into(target: &mut Option<Tensor>, shape: &[usize], f: impl FnOnce(&mut [f64])) {
    let t = target.get_or_insert_with(|| Tensor::zeros(shape));
    f(t.data_mut());
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Drops every node recorded after the first `len`. Vars past the cut
    /// become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.values.truncate(len);
        self.ops.truncate(len);
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.values.push(Cow::Owned(value));
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    /// Leaf owning its value.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf borrowing its value (parameters are not copied onto the tape).
    pub fn leaf_ref(&mut self, value: &'a Tensor) -> Var {
        self.values.push(Cow::Borrowed(value));
        self.ops.push(Op::Leaf);
        Var(self.values.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (x, y) = (self.value(a), self.value(b));
        let (m, k, n) = (x.rows(), x.cols(), y.cols());
        if y.rows() != k {
            return Err(shape_err("matmul", x, y));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let xr = x.row_slice(i);
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &xv) in xr.iter().enumerate() {
                let yr = y.row_slice(p);
                for (o, &yv) in orow.iter_mut().zip(yr) {
                    *o += xv * yv;
                }
            }
        }
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b)))
    }

    /// `a . b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (x, y) = (self.value(a), self.value(b));
        let (m, k, n) = (x.rows(), x.cols(), y.rows());
        if y.cols() != k {
            return Err(shape_err("matmul_nt", x, y));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let xr = x.row_slice(i);
            for j in 0..n {
                out[i * n + j] = kernels::dot(xr, y.row_slice(j));
            }
        }
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNT(a, b)))
    }

    fn zip_op(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, NumericsError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err(name, x, y));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let shape = x.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip_op(a, b, "add", |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip_op(a, b, "sub", |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip_op(a, b, "mul", |p, q| p * q, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v * c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v + c);
        self.push(out, Op::AddScalar(a))
    }

    /// Elementwise `x^c`.
    pub fn pow(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v.powf(c));
        self.push(out, Op::Pow(a, c))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::sqrt);
        self.push(out, Op::Sqrt(a))
    }

    /// Sum of all entries as a 1x1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var, NumericsError> {
        let x = self.value(a);
        let c = x.cols();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= x.rows() {
                return Err(NumericsError::IndexOutOfRange { index: r, len: x.rows() });
            }
            out.extend_from_slice(x.row_slice(r));
        }
        let t = Tensor::from_parts(vec![rows.len(), c], out);
        Ok(self.push(t, Op::GatherRows(a, rows.to_vec())))
    }

    /// Sum of the selected rows as a 1 x cols node (summed in the given order).
    pub fn sum_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var, NumericsError> {
        let x = self.value(a);
        let c = x.cols();
        let mut out = vec![0.0; c];
        for &r in rows {
            if r >= x.rows() {
                return Err(NumericsError::IndexOutOfRange { index: r, len: x.rows() });
            }
            for (o, &v) in out.iter_mut().zip(x.row_slice(r)) {
                *o += v;
            }
        }
        let t = Tensor::from_parts(vec![1, c], out);
        Ok(self.push(t, Op::SumRows(a, rows.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let c = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let x = self.value(p);
            if x.cols() != c {
                return Err(shape_err("concat_rows", self.value(parts[0]), x));
            }
            rows += x.rows();
            out.extend_from_slice(x.data());
        }
        Ok(self.push(Tensor::from_parts(vec![rows, c], out), Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let r = self.value(parts[0]).rows();
        for &p in parts {
            if self.value(p).rows() != r {
                return Err(shape_err("concat_cols", self.value(parts[0]), self.value(p)));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        Ok(self.push(Tensor::from_parts(vec![r, total], out), Op::ConcatCols(parts.to_vec())))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let t = self.value(a).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var, NumericsError> {
        let x = self.value(a);
        let (r, c) = (x.rows(), x.cols());
        let mut out = vec![0.0; r * c];
        let mut norms = Vec::with_capacity(r);
        for i in 0..r {
            norms.push(kernels::normalize_slice(x.row_slice(i), &mut out[i * c..(i + 1) * c])?);
        }
        let t = Tensor::from_parts(vec![r, c], out);
        Ok(self.push(t, Op::NormalizeRows(a, norms)))
    }

    /// Row-wise `softmax(scale * x)`; columns with `mask[j] == false` get exactly 0.
    pub fn softmax_rows(
        &mut self,
        a: Var,
        scale: f64,
        mask: Option<&[bool]>,
    ) -> Result<Var, NumericsError> {
        let x = self.value(a);
        let (r, c) = (x.rows(), x.cols());
        if let Some(m) = mask {
            if m.len() != c {
                return Err(NumericsError::ShapeMismatch {
                    op: "softmax_rows mask",
                    left: x.shape().to_vec(),
                    right: vec![m.len()],
                });
            }
        }
        let mut out = vec![0.0; r * c];
        let mut row = vec![0.0; c];
        for i in 0..r {
            row.copy_from_slice(x.row_slice(i));
            if let Some(m) = mask {
                for (v, &keep) in row.iter_mut().zip(m) {
                    if !keep {
                        *v = f64::NEG_INFINITY;
                    }
                }
            }
            kernels::softmax_slice(&row, scale, &mut out[i * c..(i + 1) * c])?;
        }
        let t = Tensor::from_parts(vec![r, c], out);
        Ok(self.push(t, Op::SoftmaxRows(a, scale)))
    }

    /// Lp pooling down each column: `out[j] = (sum_i x[i,j]^p)^(1/p)`.
    pub fn lp_pool_columns(&mut self, a: Var, p: f64) -> Result<Var, NumericsError> {
        if !(p >= 1.0) {
            return Err(NumericsError::InvalidP(p));
        }
        let x = self.value(a);
        let (r, c) = (x.rows(), x.cols());
        let mut col = vec![0.0; r];
        let mut out = vec![0.0; c];
        for (j, o) in out.iter_mut().enumerate() {
            for (i, v) in col.iter_mut().enumerate() {
                *v = x.get(i, j);
                if *v < 0.0 {
                    return Err(NumericsError::NegativePoolInput(*v));
                }
            }
            *o = lp_pool_slice(&col, p);
        }
        Ok(self.push(Tensor::from_parts(vec![1, c], out), Op::LpPoolColumns(a, p)))
    }

    /// Max down each column (first maximum wins for gradient routing).
    pub fn max_pool_columns(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (r, c) = (x.rows(), x.cols());
        let mut out = vec![0.0; c];
        let mut arg = vec![0; c];
        for j in 0..c {
            let mut best = 0;
            for i in 1..r {
                if x.get(i, j) > x.get(best, j) {
                    best = i;
                }
            }
            arg[j] = best;
            out[j] = x.get(best, j);
        }
        self.push(Tensor::from_parts(vec![1, c], out), Op::MaxPoolColumns(a, arg))
    }

    /// Probabilities `softmax(scale * logits)` of a 1 x n logits node, with masked
    /// columns excluded. Returns the probability row as a plain tensor.
    pub fn probabilities(
        &self,
        logits: Var,
        scale: f64,
        mask: Option<&[bool]>,
    ) -> Result<Vec<f64>, NumericsError> {
        let x = self.value(logits);
        match mask {
            Some(m) => kernels::masked_softmax(x.data(), m, scale),
            None => {
                let mut out = vec![0.0; x.len()];
                kernels::softmax_slice(x.data(), scale, &mut out)?;
                Ok(out)
            }
        }
    }

    /// Cross-entropy `-ln max(p[target], 1e-30)` of `p = softmax(scale * logits)`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        target: usize,
        scale: f64,
        mask: Option<&[bool]>,
    ) -> Result<Var, NumericsError> {
        let probs = self.probabilities(logits, scale, mask)?;
        if target >= probs.len() || mask.is_some_and(|m| !m[target]) {
            return Err(NumericsError::IndexOutOfRange { index: target, len: probs.len() });
        }
        let loss = -probs[target].max(PROB_FLOOR).ln();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent { logits, target, scale, probs },
        ))
    }

    /// Local-reparameterization sample of a Gaussian-weight linear map:
    /// `gamma + sqrt(delta) * noise` with `gamma = x W`, `delta = x^2 exp(logvar)`.
    pub fn variational_linear(
        &mut self,
        x: Var,
        theta: Var,
        logvar: Var,
        layout: WeightLayout,
        noise: Tensor,
    ) -> Result<Var, NumericsError> {
        let (xv, tv, lv) = (self.value(x), self.value(theta), self.value(logvar));
        if tv.shape() != lv.shape() {
            return Err(shape_err("variational_linear", tv, lv));
        }
        let variance = lv.map(variance_of);
        let (out, spread) = variational_kernel(xv, tv, &variance, layout, &noise)?;
        let op = Op::VariationalLinear { x, theta, logvar, layout, noise, variance, spread };
        Ok(self.push(out, op))
    }

    /// Reverse pass seeded with d(loss)/d(loss) = 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let v = self.value(loss);
        if v.len() != 1 {
            return Err(NumericsError::InvalidShape(v.shape().to_vec()));
        }
        self.backward_with(loss, Tensor::from_parts(v.shape().to_vec(), vec![1.0]))
    }

    /// Reverse pass from `root` with an arbitrary upstream gradient.
    pub fn backward_with(&self, root: Var, seed: Tensor) -> Result<Gradients, NumericsError> {
        if seed.shape() != self.value(root).shape() {
            return Err(shape_err("backward seed", &seed, self.value(root)));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads.resize(self.values.len(), None);
        Ok(Gradients { grads })
    }

    fn shape_of(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let out = &self.values[i];
        match &self.ops[i] {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let (m, k, n) = (x.rows(), x.cols(), y.cols());
                // dA = G B^T
                add_into(&mut grads[a.0], x.shape(), |ga| {
                    for r in 0..m {
                        for p in 0..k {
                            let yr = y.row_slice(p);
                            ga[r * k + p] += kernels::dot(&gd[r * n..(r + 1) * n], yr);
                        }
                    }
                });
                // dB = A^T G
                add_into(&mut grads[b.0], y.shape(), |gb| {
                    for r in 0..m {
                        let grow = &gd[r * n..(r + 1) * n];
                        for (p, &xv) in x.row_slice(r).iter().enumerate() {
                            for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += xv * gv;
                            }
                        }
                    }
                });
            }
            Op::MatMulNT(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let (m, k, n) = (x.rows(), x.cols(), y.rows());
                // dA = G B
                add_into(&mut grads[a.0], x.shape(), |ga| {
                    for r in 0..m {
                        let arow = &mut ga[r * k..(r + 1) * k];
                        for j in 0..n {
                            let gv = gd[r * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for (o, &yv) in arow.iter_mut().zip(y.row_slice(j)) {
                                *o += gv * yv;
                            }
                        }
                    }
                });
                // dB = G^T A
                add_into(&mut grads[b.0], y.shape(), |gb| {
                    for r in 0..m {
                        let xr = x.row_slice(r);
                        for j in 0..n {
                            let gv = gd[r * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for (o, &xv) in gb[j * k..(j + 1) * k].iter_mut().zip(xr) {
                                *o += gv * xv;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                let s = self.shape_of(*a);
                add_into(&mut grads[a.0], &s, |t| t.iter_mut().zip(gd).for_each(|(o, &v)| *o += v));
                add_into(&mut grads[b.0], &s, |t| t.iter_mut().zip(gd).for_each(|(o, &v)| *o += v));
            }
            Op::Sub(a, b) => {
                let s = self.shape_of(*a);
                add_into(&mut grads[a.0], &s, |t| t.iter_mut().zip(gd).for_each(|(o, &v)| *o += v));
                add_into(&mut grads[b.0], &s, |t| t.iter_mut().zip(gd).for_each(|(o, &v)| *o -= v));
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                add_into(&mut grads[a.0], x.shape(), |t| {
                    for ((o, &v), &yv) in t.iter_mut().zip(gd).zip(y.data()) {
                        *o += v * yv;
                    }
                });
                add_into(&mut grads[b.0], y.shape(), |t| {
                    for ((o, &v), &xv) in t.iter_mut().zip(gd).zip(x.data()) {
                        *o += v * xv;
                    }
                });
            }
            Op::Scale(a, c) => {
                let s = self.shape_of(*a);
                add_into(&mut grads[a.0], &s, |t| t.iter_mut().zip(gd).for_each(|(o, &v)| *o += c * v));
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                let s = self.shape_of(*a);
                add_into(&mut grads[a.0], &s, |t| t.iter_mut().zip(gd).for_each(|(o, &v)| *o += v));
            }
            Op::Pow(a, c) => {
                let x = self.value(*a);
                add_into(&mut grads[a.0], x.shape(), |t| {
                    for ((o, &v), &xv) in t.iter_mut().zip(gd).zip(x.data()) {
                        *o += v * c * xv.powf(c - 1.0);
                    }
                });
            }
            Op::Exp(a) => {
                let s = self.shape_of(*a);
                add_into(&mut grads[a.0], &s, |t| {
                    for ((o, &v), &y) in t.iter_mut().zip(gd).zip(out.data()) {
                        *o += v * y;
                    }
                });
            }
            Op::Ln(a) => {
                let x = self.value(*a);
                add_into(&mut grads[a.0], x.shape(), |t| {
                    for ((o, &v), &xv) in t.iter_mut().zip(gd).zip(x.data()) {
                        *o += v / xv;
                    }
                });
            }
            Op::Sqrt(a) => {
                let s = self.shape_of(*a);
                add_into(&mut grads[a.0], &s, |t| {
                    for ((o, &v), &y) in t.iter_mut().zip(gd).zip(out.data()) {
                        *o += v * 0.5 / y;
                    }
                });
            }
            Op::Sum(a) => {
                let s = self.shape_of(*a);
                let gv = gd[0];
                add_into(&mut grads[a.0], &s, |t| t.iter_mut().for_each(|o| *o += gv));
            }
            Op::GatherRows(a, rows) => {
                let s = self.shape_of(*a);
                let c = s[s.len() - 1];
                add_into(&mut grads[a.0], &s, |t| {
                    for (k, &r) in rows.iter().enumerate() {
                        for (o, &v) in t[r * c..(r + 1) * c].iter_mut().zip(&gd[k * c..(k + 1) * c]) {
                            *o += v;
                        }
                    }
                });
            }
            Op::SumRows(a, rows) => {
                let s = self.shape_of(*a);
                let c = s[s.len() - 1];
                add_into(&mut grads[a.0], &s, |t| {
                    for &r in rows {
                        for (o, &v) in t[r * c..(r + 1) * c].iter_mut().zip(gd) {
                            *o += v;
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let s = self.shape_of(*p);
                    let n = self.value(*p).len();
                    add_into(&mut grads[p.0], &s, |t| {
                        t.iter_mut().zip(&gd[offset..offset + n]).for_each(|(o, &v)| *o += v)
                    });
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut col = 0;
                for p in parts {
                    let x = self.value(*p);
                    let (r, c) = (x.rows(), x.cols());
                    add_into(&mut grads[p.0], x.shape(), |t| {
                        for i in 0..r {
                            let src = &gd[i * total + col..i * total + col + c];
                            t[i * c..(i + 1) * c].iter_mut().zip(src).for_each(|(o, &v)| *o += v);
                        }
                    });
                    col += c;
                }
            }
            Op::NormalizeRows(a, norms) => {
                // d(x/|x|) = (g - (g.y) y) / |x|
                let c = out.cols();
                let s = self.shape_of(*a);
                add_into(&mut grads[a.0], &s, |t| {
                    for (r, &nrm) in norms.iter().enumerate() {
                        let y = out.row_slice(r);
                        let gr = &gd[r * c..(r + 1) * c];
                        let proj = kernels::dot(gr, y);
                        for ((o, &gv), &yv) in t[r * c..(r + 1) * c].iter_mut().zip(gr).zip(y) {
                            *o += (gv - proj * yv) / nrm;
                        }
                    }
                });
            }
            Op::SoftmaxRows(a, scale) => {
                let c = out.cols();
                let s = self.shape_of(*a);
                add_into(&mut grads[a.0], &s, |t| {
                    for r in 0..out.rows() {
                        let y = out.row_slice(r);
                        let gr = &gd[r * c..(r + 1) * c];
                        let inner = kernels::dot(gr, y);
                        for ((o, &gv), &yv) in t[r * c..(r + 1) * c].iter_mut().zip(gr).zip(y) {
                            *o += scale * yv * (gv - inner);
                        }
                    }
                });
            }
            Op::LpPoolColumns(a, p) => {
                let x = self.value(*a);
                let (r, c) = (x.rows(), x.cols());
                add_into(&mut grads[a.0], x.shape(), |t| {
                    for j in 0..c {
                        let pooled = out.data()[j];
                        for i in 0..r {
                            t[i * c + j] += gd[j] * lp_pool_partial(x.get(i, j), pooled, *p, r);
                        }
                    }
                });
            }
            Op::MaxPoolColumns(a, arg) => {
                let s = self.shape_of(*a);
                let c = s[s.len() - 1];
                add_into(&mut grads[a.0], &s, |t| {
                    for (j, &i) in arg.iter().enumerate() {
                        t[i * c + j] += gd[j];
                    }
                });
            }
            Op::SoftmaxXent { logits, target, scale, probs } => {
                let s = self.shape_of(*logits);
                let gv = gd[0];
                // below the probability floor the loss is locally constant
                if probs[*target] < PROB_FLOOR {
                    return;
                }
                add_into(&mut grads[logits.0], &s, |t| {
                    for (j, (o, &pj)) in t.iter_mut().zip(probs).enumerate() {
                        let onehot = if j == *target { 1.0 } else { 0.0 };
                        *o += gv * scale * (pj - onehot);
                    }
                });
            }
            Op::VariationalLinear { x, theta, logvar, layout, noise, variance, spread } => {
                let xv = self.value(*x);
                let tv = self.value(*theta);
                let (rows, input) = (xv.rows(), xv.cols());
                let outc = out.cols();
                // weight entry for (input i, output j)
                let widx = |i: usize, j: usize| match layout {
                    WeightLayout::OutIn => j * input + i,
                    WeightLayout::InOut => i * outc + j,
                };
                // d out / d delta = g * eps / (2 sqrt(delta))
                let gdelta: Vec<f64> = gd
                    .iter()
                    .zip(noise.data())
                    .zip(spread)
                    .map(|((&gv, &e), &sd)| if sd > 0.0 { gv * e * 0.5 / sd } else { 0.0 })
                    .collect();
                add_into(&mut grads[x.0], xv.shape(), |t| {
                    for m in 0..rows {
                        for i in 0..input {
                            let a = xv.get(m, i);
                            let mut acc = 0.0;
                            for j in 0..outc {
                                let w = widx(i, j);
                                acc += gd[m * outc + j] * tv.data()[w]
                                    + gdelta[m * outc + j] * 2.0 * a * variance.data()[w];
                            }
                            t[m * input + i] += acc;
                        }
                    }
                });
                add_into(&mut grads[theta.0], tv.shape(), |t| {
                    for m in 0..rows {
                        for i in 0..input {
                            let a = xv.get(m, i);
                            for j in 0..outc {
                                t[widx(i, j)] += gd[m * outc + j] * a;
                            }
                        }
                    }
                });
                add_into(&mut grads[logvar.0], tv.shape(), |t| {
                    for m in 0..rows {
                        for i in 0..input {
                            let a2 = xv.get(m, i) * xv.get(m, i);
                            for j in 0..outc {
                                let w = widx(i, j);
                                t[w] += gdelta[m * outc + j] * a2 * variance.data()[w];
                            }
                        }
                    }
                });
            }
        }
    }
}

/// Probabilities are floored here before taking the log in cross-entropy.
pub const PROB_FLOOR: f64 = 1e-30;

/// Shared forward kernel for the local reparameterization trick. Returns the
/// sampled pre-activations and the per-entry standard deviation `sqrt(delta)`.
pub(crate) fn variational_kernel(
    x: &Tensor,
    theta: &Tensor,
    variance: &Tensor,
    layout: WeightLayout,
    noise: &Tensor,
) -> Result<(Tensor, Vec<f64>), NumericsError> {
    let (rows, input) = (x.rows(), x.cols());
    let (w_in, w_out) = match layout {
        WeightLayout::OutIn => (theta.cols(), theta.rows()),
        WeightLayout::InOut => (theta.rows(), theta.cols()),
    };
    if w_in != input {
        return Err(shape_err("variational_linear", x, theta));
    }
    if noise.rows() != rows || noise.cols() != w_out {
        return Err(shape_err("variational_linear noise", noise, x));
    }
    let widx = |i: usize, j: usize| match layout {
        WeightLayout::OutIn => j * input + i,
        WeightLayout::InOut => i * w_out + j,
    };
    let mut out = vec![0.0; rows * w_out];
    let mut spread = vec![0.0; rows * w_out];
    for m in 0..rows {
        for j in 0..w_out {
            let mut gamma = 0.0;
            let mut delta = 0.0;
            for i in 0..input {
                let a = x.get(m, i);
                gamma += a * theta.data()[widx(i, j)];
                delta += a * a * variance.data()[widx(i, j)];
            }
            let sd = delta.sqrt();
            spread[m * w_out + j] = sd;
            out[m * w_out + j] = gamma + sd * noise.get(m, j);
        }
    }
    Ok((Tensor::from_parts(vec![rows, w_out], out), spread))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(r: usize, c: usize, d: &[f64]) -> Tensor {
        Tensor::matrix(r, c, d.to_vec()).unwrap()
    }

    #[test]
    fn quadratic_gradient_is_identity() {
        let w = mat(2, 2, &[0.5, -1.0, 2.0, 0.25]);
        let mut tape = Tape::new();
        let v = tape.leaf_ref(&w);
        let sq = tape.pow(v, 2.0);
        let s = tape.sum(sq);
        let loss = tape.scale(s, 0.5);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(v).unwrap().data(), w.data());
    }

    #[test]
    fn unused_leaf_has_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(mat(1, 2, &[1.0, 2.0]));
        let b = tape.leaf(mat(1, 2, &[3.0, 4.0]));
        let loss = tape.sum(a);
        let mut g = tape.backward(loss).unwrap();
        assert!(g.get(b).is_none());
        assert_eq!(g.take_or_zeros(b, &[1, 2]).data(), &[0.0, 0.0]);
    }

    #[test]
    fn masked_softmax_rows_zero_out() {
        let mut tape = Tape::new();
        let a = tape.leaf(mat(2, 3, &[1.0, 2.0, 3.0, 0.0, 0.0, 9.0]));
        let s = tape.softmax_rows(a, 1.0, Some(&[true, true, false])).unwrap();
        let v = tape.value(s);
        assert_eq!(v.get(0, 2), 0.0);
        assert_eq!(v.get(1, 0), 0.5);
        assert_eq!(v.get(1, 1), 0.5);
    }

    #[test]
    fn matmul_shapes_checked() {
        let mut tape = Tape::new();
        let a = tape.leaf(mat(2, 3, &[0.0; 6]));
        let b = tape.leaf(mat(2, 3, &[0.0; 6]));
        assert!(tape.matmul(a, b).is_err());
        assert!(tape.matmul_nt(a, b).is_ok());
    }

    #[test]
    fn max_pool_routes_to_first_maximum() {
        let mut tape = Tape::new();
        let a = tape.leaf(mat(2, 2, &[0.5, 0.1, 0.5, 0.3]));
        let m = tape.max_pool_columns(a);
        assert_eq!(tape.value(m).data(), &[0.5, 0.3]);
        let loss = tape.sum(m);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[1.0, 0.0, 0.0, 1.0]);
    }
}
