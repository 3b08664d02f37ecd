//! Dense-tensor computation tape with reverse-mode gradient accumulation.
//!
//! All tensors are 2-D row-major (`[rows, cols]`); vectors are `[1, n]` rows
//! and scalars are `[1, 1]`. Operations are recorded onto a [`Tape`] during
//! the forward pass; [`Tape::backward`] replays the record in reverse and
//! accumulates gradients into every node that requires them. Contributions
//! from repeated uses of the same tensor are summed, which is what makes
//! shared-weight (Siamese) training correct.
//!
//! No implicit broadcasting except bias-row addition (`add_bias`,
//! `col_scale_shift`); everything else is a shape error.

use crate::error::{Error, Result};
use std::fmt::Debug;

/// Numerically stable CCE floor.
pub const CCE_EPS: f64 = 1e-12;

/// Float type the engine runs in. Training uses `f32`, gradient checking `f64`.
pub trait Scalar:
    num_traits::Float + num_traits::NumAssign + std::iter::Sum + Default + Debug + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    /// C <- alpha * A(m x k) * B(k x n) + beta * C, with explicit strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Handle to a tensor living on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorRef(pub(crate) usize);

/// A plain owned tensor: shape plus row-major data.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: [usize; 2],
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: [usize; 2], data: Vec<T>) -> Result<Self> {
        if shape[0] * shape[1] != data.len() {
            return Err(Error::validation(format!(
                "tensor data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: [usize; 2]) -> Self {
        Tensor {
            shape,
            data: vec![T::zero(); shape[0] * shape[1]],
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: [1, 1],
            data: vec![v],
        }
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(TensorRef, TensorRef),
    Add(TensorRef, TensorRef),
    Sub(TensorRef, TensorRef),
    Mul(TensorRef, TensorRef),
    /// a[m,n] + bias[1,n] broadcast over rows
    AddBias(TensorRef, TensorRef),
    /// x[m,n] * scale[1,n] + shift[1,n], both broadcast over rows
    ColScaleShift(TensorRef, TensorRef, TensorRef),
    /// elementwise y = mul*x + add
    Affine(TensorRef, T, T),
    Sigmoid(TensorRef),
    Tanh(TensorRef),
    Relu(TensorRef),
    Exp(TensorRef),
    /// ln(1 + e^x), computed stably
    Softplus(TensorRef),
    SoftmaxRows(TensorRef),
    Sum(TensorRef),
    /// row i: sum_j |a[i,j] - b[map[i],j]| -> [m,1]
    L1Rows(TensorRef, TensorRef, Vec<usize>),
    /// row i: -sum_j t[i,j] ln(p[i,j]+eps); all-zero target rows contribute 0
    CceRows(TensorRef, TensorRef),
    ConcatCols(Vec<TensorRef>),
    SliceCols(TensorRef, usize, usize),
    SliceRows(TensorRef, usize, usize),
    GatherRows(TensorRef, Vec<usize>),
    /// scores[m,1], pairs (hi, lo) -> [P,1] of s[hi]-s[lo]
    PairDiff(TensorRef, Vec<(usize, usize)>),
    /// scores[m,1], permutation -> [1,1] ListMLE negative log-likelihood
    ListMle(TensorRef, Vec<usize>),
    /// normalize columns by batch statistics; eps inside the sqrt
    BatchNormRows(TensorRef, T),
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    /// op-specific saved values (batch-norm: [mean | var | inv_std])
    aux: Vec<T>,
}

/// Ordered record of executed operations; replaying it backward visits each
/// node exactly once in reverse execution order.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn sign<T: Scalar>(x: T) -> T {
    // subgradient of |x| at 0 is defined as 0
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool, aux: Vec<T>) -> TensorRef {
        self.nodes.push(Node {
            op,
            value,
            grad: None,
            requires_grad,
            aux,
        });
        TensorRef(self.nodes.len() - 1)
    }

    fn rg(&self, t: TensorRef) -> bool {
        self.nodes[t.0].requires_grad
    }

    pub fn value(&self, t: TensorRef) -> &Tensor<T> {
        &self.nodes[t.0].value
    }

    pub fn shape(&self, t: TensorRef) -> [usize; 2] {
        self.nodes[t.0].value.shape
    }

    /// Gradient of the last `backward` loss w.r.t. `t`, if tracked.
    pub fn grad(&self, t: TensorRef) -> Option<&[T]> {
        self.nodes[t.0].grad.as_deref()
    }

    /// Batch statistics saved by `batch_norm_rows`: (mean, variance) per column.
    pub fn batch_stats(&self, t: TensorRef) -> Option<(&[T], &[T])> {
        match self.nodes[t.0].op {
            Op::BatchNormRows(..) => {
                let n = self.nodes[t.0].value.cols();
                let aux = &self.nodes[t.0].aux;
                Some((&aux[..n], &aux[n..2 * n]))
            }
            _ => None,
        }
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> TensorRef {
        self.push(Op::Leaf, value, requires_grad, Vec::new())
    }

    pub fn constant(&mut self, value: Tensor<T>) -> TensorRef {
        self.push(Op::Leaf, value, false, Vec::new())
    }

    pub fn scalar_const(&mut self, v: T) -> TensorRef {
        self.constant(Tensor::scalar(v))
    }

    // ---- ops ----

    pub fn matmul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        unsafe {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                self.nodes[a.0].value.data.as_ptr(),
                k as isize,
                1,
                self.nodes[b.0].value.data.as_ptr(),
                n as isize,
                1,
                T::zero(),
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), Tensor { shape: [m, n], data: out }, rg, Vec::new()))
    }

    fn binary_same_shape(
        &mut self,
        op_name: &'static str,
        a: TensorRef,
        b: TensorRef,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<TensorRef> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op_name, &sa, &sb));
        }
        let data = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(op, Tensor { shape: sa, data }, rg, Vec::new()))
    }

    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn add_bias(&mut self, a: TensorRef, bias: TensorRef) -> Result<TensorRef> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        if sb[0] != 1 || sb[1] != sa[1] {
            return Err(Error::shape("add_bias", &sa, &sb));
        }
        let n = sa[1];
        let mut data = self.nodes[a.0].value.data.clone();
        for row in data.chunks_mut(n) {
            for (x, &b) in row.iter_mut().zip(&self.nodes[bias.0].value.data) {
                *x += b;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(Op::AddBias(a, bias), Tensor { shape: sa, data }, rg, Vec::new()))
    }

    pub fn col_scale_shift(
        &mut self,
        x: TensorRef,
        scale: TensorRef,
        shift: TensorRef,
    ) -> Result<TensorRef> {
        let (sx, ss, sh) = (self.shape(x), self.shape(scale), self.shape(shift));
        if ss != [1, sx[1]] || sh != [1, sx[1]] {
            return Err(Error::shape("col_scale_shift", &sx, &ss));
        }
        let n = sx[1];
        let mut data = self.nodes[x.0].value.data.clone();
        for row in data.chunks_mut(n) {
            for j in 0..n {
                row[j] = row[j] * self.nodes[scale.0].value.data[j] + self.nodes[shift.0].value.data[j];
            }
        }
        let rg = self.rg(x) || self.rg(scale) || self.rg(shift);
        Ok(self.push(
            Op::ColScaleShift(x, scale, shift),
            Tensor { shape: sx, data },
            rg,
            Vec::new(),
        ))
    }

    pub fn affine(&mut self, a: TensorRef, mul: T, add: T) -> TensorRef {
        let s = self.shape(a);
        let data = self.nodes[a.0].value.data.iter().map(|&x| mul * x + add).collect();
        let rg = self.rg(a);
        self.push(Op::Affine(a, mul, add), Tensor { shape: s, data }, rg, Vec::new())
    }

    pub fn neg(&mut self, a: TensorRef) -> TensorRef {
        self.affine(a, -T::one(), T::zero())
    }

    fn unary(&mut self, a: TensorRef, f: impl Fn(T) -> T, op: Op<T>) -> TensorRef {
        let s = self.shape(a);
        let data = self.nodes[a.0].value.data.iter().map(|&x| f(x)).collect();
        let rg = self.rg(a);
        self.push(op, Tensor { shape: s, data }, rg, Vec::new())
    }

    pub fn sigmoid(&mut self, a: TensorRef) -> TensorRef {
        self.unary(a, stable_sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: TensorRef) -> TensorRef {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn relu(&mut self, a: TensorRef) -> TensorRef {
        self.unary(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn exp(&mut self, a: TensorRef) -> TensorRef {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn softplus(&mut self, a: TensorRef) -> TensorRef {
        self.unary(a, stable_softplus, Op::Softplus(a))
    }

    /// Row-wise softmax with max-shift.
    pub fn softmax_rows(&mut self, a: TensorRef) -> TensorRef {
        let s = self.shape(a);
        let n = s[1];
        let mut data = self.nodes[a.0].value.data.clone();
        for row in data.chunks_mut(n) {
            let mx = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        let rg = self.rg(a);
        self.push(Op::SoftmaxRows(a), Tensor { shape: s, data }, rg, Vec::new())
    }

    pub fn sum(&mut self, a: TensorRef) -> TensorRef {
        let total = self.nodes[a.0].value.data.iter().cloned().sum();
        let rg = self.rg(a);
        self.push(Op::Sum(a), Tensor::scalar(total), rg, Vec::new())
    }

    /// Per-row L1 distance between `a[i]` and `b[map[i]]` -> `[m,1]`.
    /// `map` must index valid rows of `b`; use `0..m` for aligned operands.
    pub fn l1_rows(&mut self, a: TensorRef, b: TensorRef, map: Vec<usize>) -> Result<TensorRef> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[1] != sb[1] || map.len() != sa[0] || map.iter().any(|&r| r >= sb[0]) {
            return Err(Error::shape("l1_rows", &sa, &sb));
        }
        let n = sa[1];
        let mut out = Vec::with_capacity(sa[0]);
        for (i, &bi) in map.iter().enumerate() {
            let ra = &self.nodes[a.0].value.data[i * n..(i + 1) * n];
            let rb = &self.nodes[b.0].value.data[bi * n..(bi + 1) * n];
            out.push(ra.iter().zip(rb).map(|(&x, &y)| (x - y).abs()).sum());
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Op::L1Rows(a, b, map),
            Tensor { shape: [sa[0], 1], data: out },
            rg,
            Vec::new(),
        ))
    }

    /// Per-row CCE with the `CCE_EPS` floor; all-zero target rows contribute 0.
    pub fn cce_rows(&mut self, target: TensorRef, pred: TensorRef) -> Result<TensorRef> {
        let (st, sp) = (self.shape(target), self.shape(pred));
        if st != sp {
            return Err(Error::shape("cce_rows", &st, &sp));
        }
        let n = st[1];
        let eps = T::from_f64(CCE_EPS);
        let mut out = Vec::with_capacity(st[0]);
        for i in 0..st[0] {
            let t = &self.nodes[target.0].value.data[i * n..(i + 1) * n];
            let p = &self.nodes[pred.0].value.data[i * n..(i + 1) * n];
            if t.iter().all(|&x| x == T::zero()) {
                out.push(T::zero());
            } else {
                out.push(-t.iter().zip(p).map(|(&ti, &pi)| ti * (pi + eps).ln()).sum::<T>());
            }
        }
        let rg = self.rg(target) || self.rg(pred);
        Ok(self.push(
            Op::CceRows(target, pred),
            Tensor { shape: [st[0], 1], data: out },
            rg,
            Vec::new(),
        ))
    }

    pub fn concat_cols(&mut self, parts: &[TensorRef]) -> Result<TensorRef> {
        if parts.is_empty() {
            return Err(Error::validation("concat_cols: empty input list"));
        }
        let m = self.shape(parts[0])[0];
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[0] != m {
                return Err(Error::shape("concat_cols", &[m, 0], &s));
            }
            total += s[1];
        }
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                let n = self.shape(p)[1];
                data.extend_from_slice(&self.nodes[p.0].value.data[i * n..(i + 1) * n]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Op::ConcatCols(parts.to_vec()),
            Tensor { shape: [m, total], data },
            rg,
            Vec::new(),
        ))
    }

    pub fn slice_cols(&mut self, a: TensorRef, start: usize, len: usize) -> Result<TensorRef> {
        let s = self.shape(a);
        if start + len > s[1] {
            return Err(Error::shape("slice_cols", &s, &[start, len]));
        }
        let mut data = Vec::with_capacity(s[0] * len);
        for i in 0..s[0] {
            data.extend_from_slice(&self.nodes[a.0].value.data[i * s[1] + start..i * s[1] + start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Op::SliceCols(a, start, len),
            Tensor { shape: [s[0], len], data },
            rg,
            Vec::new(),
        ))
    }

    pub fn slice_rows(&mut self, a: TensorRef, start: usize, len: usize) -> Result<TensorRef> {
        let s = self.shape(a);
        if start + len > s[0] {
            return Err(Error::shape("slice_rows", &s, &[start, len]));
        }
        let data = self.nodes[a.0].value.data[start * s[1]..(start + len) * s[1]].to_vec();
        let rg = self.rg(a);
        Ok(self.push(
            Op::SliceRows(a, start, len),
            Tensor { shape: [len, s[1]], data },
            rg,
            Vec::new(),
        ))
    }

    pub fn gather_rows(&mut self, a: TensorRef, indices: Vec<usize>) -> Result<TensorRef> {
        let s = self.shape(a);
        if indices.iter().any(|&i| i >= s[0]) {
            return Err(Error::validation(format!(
                "gather_rows: index out of range for {} rows",
                s[0]
            )));
        }
        let mut data = Vec::with_capacity(indices.len() * s[1]);
        for &i in &indices {
            data.extend_from_slice(&self.nodes[a.0].value.data[i * s[1]..(i + 1) * s[1]]);
        }
        let m = indices.len();
        let rg = self.rg(a);
        Ok(self.push(
            Op::GatherRows(a, indices),
            Tensor { shape: [m, s[1]], data },
            rg,
            Vec::new(),
        ))
    }

    /// z_p = scores[hi_p] - scores[lo_p] for each pair -> `[P,1]`.
    pub fn pair_diff(&mut self, scores: TensorRef, pairs: Vec<(usize, usize)>) -> Result<TensorRef> {
        let s = self.shape(scores);
        if s[1] != 1 {
            return Err(Error::shape("pair_diff", &s, &[s[0], 1]));
        }
        if pairs.iter().any(|&(h, l)| h >= s[0] || l >= s[0]) {
            return Err(Error::validation("pair_diff: pair index out of range"));
        }
        let d = &self.nodes[scores.0].value.data;
        let out: Vec<T> = pairs.iter().map(|&(h, l)| d[h] - d[l]).collect();
        let m = pairs.len();
        let rg = self.rg(scores);
        Ok(self.push(
            Op::PairDiff(scores, pairs),
            Tensor { shape: [m, 1], data: out },
            rg,
            Vec::new(),
        ))
    }

    /// ListMLE negative log-likelihood of `perm` under the score column.
    /// Value = sum_i [ -s[perm[i]] + logsumexp_{j>=i} s[perm[j]] ].
    pub fn list_mle(&mut self, scores: TensorRef, perm: Vec<usize>) -> Result<TensorRef> {
        let s = self.shape(scores);
        if s[1] != 1 || perm.len() != s[0] {
            return Err(Error::shape("list_mle", &s, &[perm.len(), 1]));
        }
        let d = &self.nodes[scores.0].value.data;
        let n = perm.len();
        // suffix logsumexp, computed back to front
        let mut lse = vec![T::zero(); n];
        let mut acc = T::neg_infinity();
        for i in (0..n).rev() {
            acc = log_add_exp(acc, d[perm[i]]);
            lse[i] = acc;
        }
        let mut loss = T::zero();
        for i in 0..n {
            loss += -d[perm[i]] + lse[i];
        }
        let rg = self.rg(scores);
        Ok(self.push(Op::ListMle(scores, perm), Tensor::scalar(loss), rg, lse))
    }

    /// Column-wise normalization by batch mean/variance (no learned scale/shift).
    /// Requires at least 2 rows. Saves (mean, var, inv_std) for `batch_stats`.
    pub fn batch_norm_rows(&mut self, x: TensorRef, eps: T) -> Result<TensorRef> {
        let s = self.shape(x);
        let (m, n) = (s[0], s[1]);
        if m < 2 {
            return Err(Error::validation(format!(
                "batch_norm_rows: batch size {} < 2 in train mode",
                m
            )));
        }
        let d = &self.nodes[x.0].value.data;
        let inv_m = T::one() / T::from_f64(m as f64);
        let mut mean = vec![T::zero(); n];
        let mut var = vec![T::zero(); n];
        for i in 0..m {
            for j in 0..n {
                mean[j] += d[i * n + j];
            }
        }
        for mj in mean.iter_mut() {
            *mj *= inv_m;
        }
        for i in 0..m {
            for j in 0..n {
                let c = d[i * n + j] - mean[j];
                var[j] += c * c;
            }
        }
        for vj in var.iter_mut() {
            *vj *= inv_m;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = (d[i * n + j] - mean[j]) * inv_std[j];
            }
        }
        let mut aux = mean;
        aux.extend(var);
        aux.extend(inv_std);
        let rg = self.rg(x);
        Ok(self.push(
            Op::BatchNormRows(x, eps),
            Tensor { shape: s, data: out },
            rg,
            aux,
        ))
    }

    // ---- backward ----

    /// Accumulate gradients of a scalar `loss` into every node that requires
    /// them. Multiple uses of the same tensor sum their contributions.
    pub fn backward(&mut self, loss: TensorRef) -> Result<()> {
        if self.shape(loss) != [1, 1] {
            return Err(Error::Contract(format!(
                "backward: loss must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        for node in self.nodes.iter_mut() {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            if self.nodes[idx].grad.is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            let op = self.nodes[idx].op.clone();
            self.step_backward(idx, op);
        }
        Ok(())
    }

    fn ensure_grad(&mut self, t: TensorRef) {
        if self.nodes[t.0].grad.is_none() {
            let n = self.nodes[t.0].value.data.len();
            self.nodes[t.0].grad = Some(vec![T::zero(); n]);
        }
    }

    fn step_backward(&mut self, idx: usize, op: Op<T>) {
        let g = self.nodes[idx].grad.clone().expect("grad present");
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let sa = self.shape(a);
                let sb = self.shape(b);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.rg(a) {
                    // dA += G (m x n) * B^T (n x k)
                    self.ensure_grad(a);
                    let bp = self.nodes[b.0].value.data.as_ptr();
                    let gp = g.as_ptr();
                    let da = self.nodes[a.0].grad.as_mut().unwrap().as_mut_ptr();
                    unsafe {
                        T::gemm(m, n, k, T::one(), gp, n as isize, 1, bp, 1, n as isize, T::one(), da, k as isize, 1);
                    }
                }
                if self.rg(b) {
                    // dB += A^T (k x m) * G (m x n)
                    self.ensure_grad(b);
                    let ap = self.nodes[a.0].value.data.as_ptr();
                    let gp = g.as_ptr();
                    let db = self.nodes[b.0].grad.as_mut().unwrap().as_mut_ptr();
                    unsafe {
                        T::gemm(k, m, n, T::one(), ap, 1, k as isize, gp, n as isize, 1, T::one(), db, n as isize, 1);
                    }
                }
            }
            Op::Add(a, b) => {
                for (t, sgn) in [(a, T::one()), (b, T::one())] {
                    let _ = sgn;
                    if self.rg(t) {
                        self.ensure_grad(t);
                        let gt = self.nodes[t.0].grad.as_mut().unwrap();
                        for (gi, &gv) in gt.iter_mut().zip(&g) {
                            *gi += gv;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.rg(a) {
                    self.ensure_grad(a);
                    let gt = self.nodes[a.0].grad.as_mut().unwrap();
                    for (gi, &gv) in gt.iter_mut().zip(&g) {
                        *gi += gv;
                    }
                }
                if self.rg(b) {
                    self.ensure_grad(b);
                    let gt = self.nodes[b.0].grad.as_mut().unwrap();
                    for (gi, &gv) in gt.iter_mut().zip(&g) {
                        *gi -= gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.rg(a) {
                    self.ensure_grad(a);
                    let bd = self.nodes[b.0].value.data.clone();
                    let gt = self.nodes[a.0].grad.as_mut().unwrap();
                    for ((gi, &gv), &bv) in gt.iter_mut().zip(&g).zip(&bd) {
                        *gi += gv * bv;
                    }
                }
                if self.rg(b) {
                    self.ensure_grad(b);
                    let ad = self.nodes[a.0].value.data.clone();
                    let gt = self.nodes[b.0].grad.as_mut().unwrap();
                    for ((gi, &gv), &av) in gt.iter_mut().zip(&g).zip(&ad) {
                        *gi += gv * av;
                    }
                }
            }
            Op::AddBias(a, bias) => {
                let n = self.shape(a)[1];
                if self.rg(a) {
                    self.ensure_grad(a);
                    let gt = self.nodes[a.0].grad.as_mut().unwrap();
                    for (gi, &gv) in gt.iter_mut().zip(&g) {
                        *gi += gv;
                    }
                }
                if self.rg(bias) {
                    self.ensure_grad(bias);
                    let gt = self.nodes[bias.0].grad.as_mut().unwrap();
                    for (i, &gv) in g.iter().enumerate() {
                        gt[i % n] += gv;
                    }
                }
            }
            Op::ColScaleShift(x, scale, shift) => {
                let n = self.shape(x)[1];
                if self.rg(x) {
                    self.ensure_grad(x);
                    let sd = self.nodes[scale.0].value.data.clone();
                    let gt = self.nodes[x.0].grad.as_mut().unwrap();
                    for (i, &gv) in g.iter().enumerate() {
                        gt[i] += gv * sd[i % n];
                    }
                }
                if self.rg(scale) {
                    self.ensure_grad(scale);
                    let xd = self.nodes[x.0].value.data.clone();
                    let gt = self.nodes[scale.0].grad.as_mut().unwrap();
                    for (i, &gv) in g.iter().enumerate() {
                        gt[i % n] += gv * xd[i];
                    }
                }
                if self.rg(shift) {
                    self.ensure_grad(shift);
                    let gt = self.nodes[shift.0].grad.as_mut().unwrap();
                    for (i, &gv) in g.iter().enumerate() {
                        gt[i % n] += gv;
                    }
                }
            }
            Op::Affine(a, mul, _) => {
                if self.rg(a) {
                    self.ensure_grad(a);
                    let gt = self.nodes[a.0].grad.as_mut().unwrap();
                    for (gi, &gv) in gt.iter_mut().zip(&g) {
                        *gi += gv * mul;
                    }
                }
            }
            Op::Sigmoid(a) => {
                if self.rg(a) {
                    self.ensure_grad(a);
                    let y = self.nodes[idx].value.data.clone();
                    let gt = self.nodes[a.0].grad.as_mut().unwrap();
                    for ((gi, &gv), &yv) in gt.iter_mut().zip(&g).zip(&y) {
                        *gi += gv * yv * (T::one() - yv);
                    }
                }
            }
            Op::Tanh(a) => {
                if self.rg(a) {
                    self.ensure_grad(a);
                    let y = self.nodes[idx].value.data.clone();
                    let gt = self.nodes[a.0].grad.as_mut().unwrap();
                    for ((gi, &gv), &yv) in gt.iter_mut().zip(&g).zip(&y) {
                        *gi += gv * (T::one() - yv * yv);
                    }
                }
            }
            Op::Relu(a) => {
                if self.rg(a) {
                    self.ensure_grad(a);
                    let x = self.nodes[a.0].value.data.clone();
                    let gt = self.nodes[a.0].grad.as_mut().unwrap();
                    for ((gi, &gv), &xv) in gt.iter_mut().zip(&g).zip(&x) {
                        if xv > T::zero() {
                            *gi += gv;
                        }
                    }
                }
            }
            Op::Exp(a) => {
                if self.rg(a) {
                    self.ensure_grad(a);
                    let y = self.nodes[idx].value.data.clone();
                    let gt = self.nodes[a.0].grad.as_mut().unwrap();
                    for ((gi, &gv), &yv) in gt.iter_mut().zip(&g).zip(&y) {
                        *gi += gv * yv;
                    }
                }
            }
            Op::Softplus(a) => {
                if self.rg(a) {
                    self.ensure_grad(a);
                    let x = self.nodes[a.0].value.data.clone();
                    let gt = self.nodes[a.0].grad.as_mut().unwrap();
                    for ((gi, &gv), &xv) in gt.iter_mut().zip(&g).zip(&x) {
                        *gi += gv * stable_sigmoid(xv);
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if self.rg(a) {
                    self.ensure_grad(a);
                    let n = self.shape(a)[1];
                    let y = self.nodes[idx].value.data.clone();
                    let gt = self.nodes[a.0].grad.as_mut().unwrap();
                    for r in 0..y.len() / n {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: T = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                        for j in 0..n {
                            gt[r * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if self.rg(a) {
                    self.ensure_grad(a);
                    let gv = g[0];
                    for gi in self.nodes[a.0].grad.as_mut().unwrap().iter_mut() {
                        *gi += gv;
                    }
                }
            }
            Op::L1Rows(a, b, map) => {
                let n = self.shape(a)[1];
                let ad = self.nodes[a.0].value.data.clone();
                let bd = self.nodes[b.0].value.data.clone();
                if self.rg(a) {
                    self.ensure_grad(a);
                    let gt = self.nodes[a.0].grad.as_mut().unwrap();
                    for (i, &bi) in map.iter().enumerate() {
                        for j in 0..n {
                            gt[i * n + j] += g[i] * sign(ad[i * n + j] - bd[bi * n + j]);
                        }
                    }
                }
                if self.rg(b) {
                    self.ensure_grad(b);
                    let gt = self.nodes[b.0].grad.as_mut().unwrap();
                    for (i, &bi) in map.iter().enumerate() {
                        for j in 0..n {
                            gt[bi * n + j] -= g[i] * sign(ad[i * n + j] - bd[bi * n + j]);
                        }
                    }
                }
            }
            Op::CceRows(target, pred) => {
                let n = self.shape(target)[1];
                let eps = T::from_f64(CCE_EPS);
                let td = self.nodes[target.0].value.data.clone();
                let pd = self.nodes[pred.0].value.data.clone();
                let rows = td.len() / n;
                if self.rg(pred) {
                    self.ensure_grad(pred);
                    let gt = self.nodes[pred.0].grad.as_mut().unwrap();
                    for i in 0..rows {
                        if td[i * n..(i + 1) * n].iter().all(|&x| x == T::zero()) {
                            continue;
                        }
                        for j in 0..n {
                            gt[i * n + j] -= g[i] * td[i * n + j] / (pd[i * n + j] + eps);
                        }
                    }
                }
                if self.rg(target) {
                    self.ensure_grad(target);
                    let gt = self.nodes[target.0].grad.as_mut().unwrap();
                    for i in 0..rows {
                        if td[i * n..(i + 1) * n].iter().all(|&x| x == T::zero()) {
                            continue;
                        }
                        for j in 0..n {
                            gt[i * n + j] -= g[i] * (pd[i * n + j] + eps).ln();
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let m = self.shape(parts[0])[0];
                let total = self.shape(TensorRef(idx))[1];
                let mut offset = 0;
                for &p in &parts {
                    let n = self.shape(p)[1];
                    if self.rg(p) {
                        self.ensure_grad(p);
                        let gt = self.nodes[p.0].grad.as_mut().unwrap();
                        for i in 0..m {
                            for j in 0..n {
                                gt[i * n + j] += g[i * total + offset + j];
                            }
                        }
                    }
                    offset += n;
                }
            }
            Op::SliceCols(a, start, len) => {
                if self.rg(a) {
                    self.ensure_grad(a);
                    let w = self.shape(a)[1];
                    let gt = self.nodes[a.0].grad.as_mut().unwrap();
                    let m = g.len() / len;
                    for i in 0..m {
                        for j in 0..len {
                            gt[i * w + start + j] += g[i * len + j];
                        }
                    }
                }
            }
            Op::SliceRows(a, start, len) => {
                if self.rg(a) {
                    self.ensure_grad(a);
                    let w = self.shape(a)[1];
                    let gt = self.nodes[a.0].grad.as_mut().unwrap();
                    for i in 0..len {
                        for j in 0..w {
                            gt[(start + i) * w + j] += g[i * w + j];
                        }
                    }
                }
            }
            Op::GatherRows(a, indices) => {
                if self.rg(a) {
                    self.ensure_grad(a);
                    let w = self.shape(a)[1];
                    let gt = self.nodes[a.0].grad.as_mut().unwrap();
                    for (i, &src) in indices.iter().enumerate() {
                        for j in 0..w {
                            gt[src * w + j] += g[i * w + j];
                        }
                    }
                }
            }
            Op::PairDiff(scores, pairs) => {
                if self.rg(scores) {
                    self.ensure_grad(scores);
                    let gt = self.nodes[scores.0].grad.as_mut().unwrap();
                    for (p, &(h, l)) in pairs.iter().enumerate() {
                        gt[h] += g[p];
                        gt[l] -= g[p];
                    }
                }
            }
            Op::ListMle(scores, perm) => {
                if self.rg(scores) {
                    self.ensure_grad(scores);
                    let lse = self.nodes[idx].aux.clone();
                    let d = self.nodes[scores.0].value.data.clone();
                    let g0 = g[0];
                    let gt = self.nodes[scores.0].grad.as_mut().unwrap();
                    // d/ds_{perm[j]} = -1 + sum_{i<=j} exp(s_{perm[j]} - lse_i)
                    for (j, &pj) in perm.iter().enumerate() {
                        let mut acc = -T::one();
                        for &li in lse.iter().take(j + 1) {
                            acc += (d[pj] - li).exp();
                        }
                        gt[pj] += g0 * acc;
                    }
                }
            }
            Op::BatchNormRows(x, _) => {
                if self.rg(x) {
                    self.ensure_grad(x);
                    let s = self.shape(x);
                    let (m, n) = (s[0], s[1]);
                    let xn = self.nodes[idx].value.data.clone();
                    let inv_std = self.nodes[idx].aux[2 * n..3 * n].to_vec();
                    let inv_m = T::one() / T::from_f64(m as f64);
                    // column-wise sums of g and g*xn
                    let mut sum_g = vec![T::zero(); n];
                    let mut sum_gx = vec![T::zero(); n];
                    for i in 0..m {
                        for j in 0..n {
                            sum_g[j] += g[i * n + j];
                            sum_gx[j] += g[i * n + j] * xn[i * n + j];
                        }
                    }
                    let gt = self.nodes[x.0].grad.as_mut().unwrap();
                    for i in 0..m {
                        for j in 0..n {
                            let dxn = g[i * n + j] - inv_m * (sum_g[j] + xn[i * n + j] * sum_gx[j]);
                            gt[i * n + j] += inv_std[j] * dxn;
                        }
                    }
                }
            }
        }
    }
}

/// Overflow-safe sigmoid (no overflow for |x| <= 100).
pub fn stable_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// ln(1 + e^x) = max(x, 0) + ln(1 + e^{-|x|}).
pub fn stable_softplus<T: Scalar>(x: T) -> T {
    let m = x.max(T::zero());
    m + ((-x.abs()).exp() + T::one()).ln()
}

fn log_add_exp<T: Scalar>(a: T, b: T) -> T {
    if a == T::neg_infinity() {
        return b;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + ((lo - hi).exp() + T::one()).ln()
}

// ---- convenience wrappers matching the engine's public operation set ----

/// Scalar L1 distance between two same-shape tensors on the tape.
pub fn l1_distance<T: Scalar>(tape: &mut Tape<T>, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa != sb {
        return Err(Error::shape("l1_distance", &sa, &sb));
    }
    // flatten both to single rows so one l1_rows row covers the whole tensor
    let fa = reshape_row(tape, a)?;
    let fb = reshape_row(tape, b)?;
    tape.l1_rows(fa, fb, vec![0])
}

fn reshape_row<T: Scalar>(tape: &mut Tape<T>, a: TensorRef) -> Result<TensorRef> {
    let s = tape.shape(a);
    if s[0] == 1 {
        return Ok(a);
    }
    let mut parts = Vec::with_capacity(s[0]);
    for i in 0..s[0] {
        parts.push(tape.slice_rows(a, i, 1)?);
    }
    tape.concat_cols(&parts)
}

/// Categorical cross entropy −Σ tᵢ·ln(pᵢ + ε). The target must be normalized
/// (entries ≥ 0 summing to 1 within 1e-6); the predicted vector is expected
/// to be a probability vector, e.g. a softmax output.
pub fn categorical_cross_entropy<T: Scalar>(
    tape: &mut Tape<T>,
    target: TensorRef,
    predicted: TensorRef,
) -> Result<TensorRef> {
    let t = tape.value(target);
    if t.data.iter().any(|&x| x < T::zero()) {
        return Err(Error::validation("categorical_cross_entropy: negative target entry"));
    }
    let total: T = t.data.iter().cloned().sum();
    if (total.to_f64() - 1.0).abs() > 1e-6 {
        return Err(Error::validation(format!(
            "categorical_cross_entropy: target sums to {}, expected 1",
            total.to_f64()
        )));
    }
    let ft = reshape_row(tape, target)?;
    let fp = reshape_row(tape, predicted)?;
    tape.cce_rows(ft, fp)
}

/// Elementwise activation selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

pub fn activation<T: Scalar>(tape: &mut Tape<T>, kind: Activation, x: TensorRef) -> TensorRef {
    match kind {
        Activation::Sigmoid => tape.sigmoid(x),
        Activation::Tanh => tape.tanh(x),
        Activation::Relu => tape.relu(x),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn t64(shape: [usize; 2], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::<f64>::new();
        let i2 = tape.constant(t64([2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let a = tape.constant(t64([2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.matmul(i2, a).unwrap();
        assert_eq!(tape.value(y).data, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_arithmetic() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t64([1, 2], &[1.0, 2.0]));
        let b = tape.constant(t64([2, 1], &[3.0, 4.0]));
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).data, vec![11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "unexpected message: {msg}");
    }

    #[test]
    fn matmul_grad_is_ones_times_b_transpose() {
        // grad of sum(A*B) w.r.t. A is ones * B^T
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t64([2, 2], &[0.3, -0.7, 1.1, 0.2]), true);
        let b = tape.constant(t64([2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = tape.matmul(a, b).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        let ga = tape.grad(a).unwrap();
        // row sums of B
        assert_relative_eq!(ga[0], 6.0);
        assert_relative_eq!(ga[1], 15.0);
        assert_relative_eq!(ga[2], 6.0);
        assert_relative_eq!(ga[3], 15.0);
    }

    #[test]
    fn activations_at_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64([1, 3], &[0.0, 0.0, -3.0]));
        let s = tape.sigmoid(x);
        let th = tape.tanh(x);
        let r = tape.relu(x);
        assert_relative_eq!(tape.value(s).data[0], 0.5);
        assert_relative_eq!(tape.value(th).data[0], 0.0);
        assert_relative_eq!(tape.value(r).data[2], 0.0);
    }

    #[test]
    fn sigmoid_minus_point_six() {
        assert_relative_eq!(stable_sigmoid(-0.6_f64), 0.35434369377420455, epsilon = 1e-9);
    }

    #[test]
    fn sigmoid_no_overflow_at_100() {
        assert!(stable_sigmoid(-100.0_f64) >= 0.0);
        assert!(stable_sigmoid(100.0_f64) <= 1.0);
        assert!(stable_sigmoid(-100.0_f32).is_finite());
    }

    #[test]
    fn l1_distance_cases() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t64([1, 2], &[1.0, 2.0]));
        let d0 = l1_distance(&mut tape, a, a).unwrap();
        assert_relative_eq!(tape.value(d0).data[0], 0.0);

        let b = tape.constant(t64([1, 2], &[0.2, -0.1]));
        let c = tape.constant(t64([1, 2], &[0.0, 0.3]));
        let d = l1_distance(&mut tape, b, c).unwrap();
        assert_relative_eq!(tape.value(d).data[0], 0.6, epsilon = 1e-12);
        let d_rev = l1_distance(&mut tape, c, b).unwrap();
        assert_eq!(tape.value(d).data[0], tape.value(d_rev).data[0]);
    }

    #[test]
    fn l1_distance_shape_mismatch() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros([1, 2]));
        let b = tape.constant(Tensor::zeros([1, 3]));
        assert!(l1_distance(&mut tape, a, b).is_err());
    }

    #[test]
    fn cce_identical_one_hot_is_zero() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(t64([1, 4], &[0.0, 1.0, 0.0, 0.0]));
        let loss = categorical_cross_entropy(&mut tape, p, p).unwrap();
        assert!(tape.value(loss).data[0].abs() < 1e-9);
    }

    #[test]
    fn cce_uniform_over_11_is_ln_11() {
        let mut tape = Tape::<f64>::new();
        let mut one_hot = vec![0.0; 11];
        one_hot[3] = 1.0;
        let t = tape.constant(t64([1, 11], &one_hot));
        let p = tape.constant(t64([1, 11], &vec![1.0 / 11.0; 11]));
        let loss = categorical_cross_entropy(&mut tape, t, p).unwrap();
        assert_relative_eq!(tape.value(loss).data[0], (11.0_f64).ln(), epsilon = 1e-9);
    }

    #[test]
    fn cce_self_equals_entropy() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(t64([1, 3], &[0.2, 0.5, 0.3]));
        let loss = categorical_cross_entropy(&mut tape, p, p).unwrap();
        let h: f64 = -(0.2_f64 * 0.2_f64.ln() + 0.5 * 0.5_f64.ln() + 0.3 * 0.3_f64.ln());
        assert_relative_eq!(tape.value(loss).data[0], h, epsilon = 1e-9);
        assert!(h > 0.0);
    }

    #[test]
    fn cce_rejects_unnormalized_target() {
        let mut tape = Tape::<f64>::new();
        let t = tape.constant(t64([1, 2], &[0.7, 0.5]));
        assert!(matches!(
            categorical_cross_entropy(&mut tape, t, t),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64([1, 3], &[2.0, -1.0, 0.5]), true);
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64([1, 3], &[2.0, -1.0, 0.5]), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_zero_constant_loss_gives_zero_grads() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64([1, 2], &[3.0, 4.0]), true);
        let zero = tape.scalar_const(0.0);
        let y = tape.mul(x, x).unwrap();
        let s = tape.sum(y);
        let loss = tape.mul(s, zero).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn shared_tensor_gets_summed_gradient() {
        // y = sum(w) + sum(2w): grad must be 3 per element
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(t64([1, 2], &[1.0, -2.0]), true);
        let s1 = tape.sum(w);
        let w2 = tape.affine(w, 2.0, 0.0);
        let s2 = tape.sum(w2);
        let loss = tape.add(s1, s2).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn batch_norm_rows_normalizes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64([4, 2], &[1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 4.0, 40.0]));
        let y = tape.batch_norm_rows(x, 1e-5).unwrap();
        let d = &tape.value(y).data;
        for j in 0..2 {
            let mean: f64 = (0..4).map(|i| d[i * 2 + j]).sum::<f64>() / 4.0;
            let var: f64 = (0..4).map(|i| (d[i * 2 + j] - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn batch_norm_rejects_single_row() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros([1, 3]));
        assert!(tape.batch_norm_rows(x, 1e-5).is_err());
    }

    #[test]
    fn tape_replay_is_deterministic() {
        let run = || {
            let mut tape = Tape::<f32>::new();
            let x = tape.leaf(Tensor::new([1, 3], vec![0.3, -0.2, 0.9]).unwrap(), true);
            let y = tape.tanh(x);
            let z = tape.sigmoid(y);
            let loss = tape.sum(z);
            tape.backward(loss).unwrap();
            (tape.value(loss).data[0].to_bits(), tape.grad(x).unwrap().to_vec())
        };
        assert_eq!(run().0, run().0);
        assert_eq!(run().1, run().1);
    }
}
