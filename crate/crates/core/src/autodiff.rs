//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive as it is evaluated. Handles ([`Var`])
//! are plain indices into the tape, so nodes are always appended after their
//! inputs and the reverse pass is a single backwards sweep.

use std::cell::{Ref, RefCell};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    Relu(Var),
    AddColBias(Var, Var),
    Expand(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Im2Col { input: Var, kernel: usize, dilation: usize },
    SoftmaxRows(Var),
    LayerNormCols { x: Var, gain: Var, shift: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Attention { q: Var, k: Var, v: Var, branches: usize, scores: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation record for one forward pass.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by leaf handle.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a differentiable leaf. Leaves that do not influence the
    /// loss receive a zero tensor; constants yield `None`.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_row_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a differentiable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[var.0].value)
    }

    pub fn shape(&self, var: Var) -> Vec<usize> {
        self.nodes.borrow()[var.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes.borrow()[var.0].requires_grad
    }

    fn push_unchecked(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var(nodes.len() - 1)
    }

    fn push(&self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.0].requires_grad)
        };
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.same_shape(op, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(va.shape().to_vec(), data))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(&self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        self.push("transpose", out, Op::Transpose(a), &[a])
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("add", a, b, |x, y| x + y)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("sub", a, b, |x, y| x - y)?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("mul", a, b, |x, y| x * y)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("div", a, b, |x, y| x / y)?;
        self.push("div", out, Op::Div(a, b), &[a, b])
    }

    pub fn scale(&self, a: Var, factor: T) -> Result<Var> {
        let out = self.value(a).map(|x| x * factor);
        self.push("scale", out, Op::Scale(a, factor), &[a])
    }

    pub fn add_const(&self, a: Var, offset: T) -> Result<Var> {
        let out = self.value(a).map(|x| x + offset);
        self.push("add_const", out, Op::AddConst(a), &[a])
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push("relu", out, Op::Relu(a), &[a])
    }

    /// `x[c][t] + bias[c]` for `x: [C×T]`, `bias: [C]`.
    pub fn add_col_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let out = {
            let (vx, vb) = (self.value(x), self.value(bias));
            let (c, t) = vx.dims2()?;
            if vb.shape() != [c] {
                return Err(Error::shape("add_col_bias", format!("{:?} + {:?}", vx.shape(), vb.shape())));
            }
            let mut data = vx.data().to_vec();
            for (row, &b) in data.chunks_mut(t).zip(vb.data()) {
                row.iter_mut().for_each(|v| *v += b);
            }
            Tensor::from_parts(vec![c, t], data)
        };
        self.push("add_col_bias", out, Op::AddColBias(x, bias), &[x, bias])
    }

    /// Broadcasts a single-element tensor to `shape`.
    pub fn expand(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = {
            let va = self.value(a);
            if va.len() != 1 {
                return Err(Error::shape("expand", format!("source {:?} is not a scalar", va.shape())));
            }
            Tensor::full(shape, va.data()[0])
        };
        self.push("expand", out, Op::Expand(a), &[a])
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push("sum", out, Op::Sum(a), &[a])
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let out = {
            let va = self.value(a);
            Tensor::scalar(va.sum() / T::lit(va.len() as f64))
        };
        self.push("mean", out, Op::Mean(a), &[a])
    }

    /// Population (divide-by-N) variance over all elements.
    pub fn variance(&self, a: Var) -> Result<Var> {
        let m = self.mean(a)?;
        let m = self.expand(m, &self.shape(a))?;
        let centered = self.sub(a, m)?;
        let sq = self.mul(centered, centered)?;
        self.mean(sq)
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    pub fn concat(&self, inputs: &[Var], axis: usize) -> Result<Var> {
        let out = {
            let values: Vec<_> = inputs.iter().map(|&v| self.value(v)).collect();
            let first = values.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
            let base = first.shape().to_vec();
            if axis >= base.len() {
                return Err(Error::shape("concat", format!("axis {axis} out of range for {base:?}")));
            }
            let mut total = 0;
            for v in &values {
                let s = v.shape();
                let compatible = s.len() == base.len()
                    && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
                if !compatible {
                    return Err(Error::shape("concat", format!("{:?} vs {base:?} on axis {axis}", s)));
                }
                total += s[axis];
            }
            let mut shape = base.clone();
            shape[axis] = total;
            let (outer, _, inner) = axis_split(&base, axis);
            let mut data = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for v in &values {
                    let chunk = v.shape()[axis] * inner;
                    data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            Tensor::from_parts(shape, data)
        };
        self.push("concat", out, Op::Concat { inputs: inputs.to_vec(), axis }, inputs)
    }

    pub fn slice(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = {
            let va = self.value(a);
            let shape = va.shape();
            if axis >= shape.len() || len == 0 || start + len > shape[axis] {
                return Err(Error::shape(
                    "slice",
                    format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
                ));
            }
            let (outer, n, inner) = axis_split(shape, axis);
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = o * n * inner + start * inner;
                data.extend_from_slice(&va.data()[base..base + len * inner]);
            }
            let mut out_shape = shape.to_vec();
            out_shape[axis] = len;
            Tensor::from_parts(out_shape, data)
        };
        self.push("slice", out, Op::Slice { input: a, axis, start }, &[a])
    }

    /// Causal patch matrix for a dilated 1-D convolution.
    ///
    /// Input `[C×T]`, output `[(C·kernel)×T]` where row `c·kernel + j` at
    /// time `t` holds `x[c][t + j·dilation − (kernel−1)·dilation]`, zero for
    /// negative indices.
    pub fn im2col_causal(&self, x: Var, kernel: usize, dilation: usize) -> Result<Var> {
        if kernel == 0 || dilation == 0 {
            return Err(Error::InvalidArgument("kernel and dilation must be positive".into()));
        }
        let out = {
            let vx = self.value(x);
            let (c, t) = vx.dims2()?;
            let pad = (kernel - 1) * dilation;
            let mut data = vec![T::zero(); c * kernel * t];
            for ch in 0..c {
                let src = vx.row(ch);
                for j in 0..kernel {
                    let shift = pad - j * dilation;
                    let dst = &mut data[(ch * kernel + j) * t..(ch * kernel + j + 1) * t];
                    if shift < t {
                        dst[shift..].copy_from_slice(&src[..t - shift]);
                    }
                }
            }
            Tensor::from_parts(vec![c * kernel, t], data)
        };
        self.push("im2col", out, Op::Im2Col { input: x, kernel, dilation }, &[x])
    }

    /// Row-wise softmax, stabilised by subtracting each row's maximum.
    pub fn softmax_rows(&self, x: Var) -> Result<Var> {
        let out = {
            let vx = self.value(x);
            let (_, c) = vx.dims2()?;
            let mut data = vx.data().to_vec();
            data.chunks_mut(c).for_each(softmax_row_in_place);
            Tensor::from_parts(vx.shape().to_vec(), data)
        };
        self.push("softmax_rows", out, Op::SoftmaxRows(x), &[x])
    }

    /// Normalizes every column of `x: [F×T]` over its `F` features, then
    /// applies a per-feature gain and shift.
    pub fn layer_norm_cols(&self, x: Var, gain: Var, shift: Var, eps: T) -> Result<Var> {
        let (out, xhat, inv_std) = {
            let (vx, vg, vs) = (self.value(x), self.value(gain), self.value(shift));
            let (f, t) = vx.dims2()?;
            if vg.shape() != [f] || vs.shape() != [f] {
                return Err(Error::shape("layer_norm", format!("features {f}, gain {:?}", vg.shape())));
            }
            let nf = T::lit(f as f64);
            let d = vx.data();
            let mut xhat = vec![T::zero(); f * t];
            let mut inv_std = vec![T::zero(); t];
            let mut out = vec![T::zero(); f * t];
            for col in 0..t {
                let mean = (0..f).map(|r| d[r * t + col]).sum::<T>() / nf;
                let var = (0..f).map(|r| (d[r * t + col] - mean).powi(2)).sum::<T>() / nf;
                let is = T::one() / (var + eps).sqrt();
                inv_std[col] = is;
                for r in 0..f {
                    let h = (d[r * t + col] - mean) * is;
                    xhat[r * t + col] = h;
                    out[r * t + col] = vg.data()[r] * h + vs.data()[r];
                }
            }
            (Tensor::from_parts(vec![f, t], out), xhat, inv_std)
        };
        self.push(
            "layer_norm",
            out,
            Op::LayerNormCols { x, gain, shift, xhat, inv_std },
            &[x, gain, shift],
        )
    }

    /// Cross-modal attention with a residual `+1` on the score.
    ///
    /// `q`, `k`, `v` are `[(B·d)×T]`; rows `b·d..(b+1)·d` belong to branch
    /// `b`. At every time step the branch vectors are stacked into `B×d`
    /// matrices and `(softmax(Q Kᵀ / √d) + 1) V` is written back in the same
    /// branch-major layout.
    pub fn leader_follower_attention(&self, q: Var, k: Var, v: Var, branches: usize) -> Result<Var> {
        let (out, scores) = {
            let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
            let (rows, t) = vq.dims2()?;
            if branches == 0 || rows % branches != 0 {
                return Err(Error::shape("attention", format!("{rows} rows for {branches} branches")));
            }
            if vk.shape() != vq.shape() || vv.shape() != vq.shape() {
                return Err(Error::shape(
                    "attention",
                    format!("q {:?}, k {:?}, v {:?}", vq.shape(), vk.shape(), vv.shape()),
                ));
            }
            let d = rows / branches;
            let inv_sqrt_d = T::one() / T::lit(d as f64).sqrt();
            let (qd, kd, vd) = (vq.data(), vk.data(), vv.data());
            let mut scores = vec![T::zero(); t * branches * branches];
            let mut out = vec![T::zero(); rows * t];
            for col in 0..t {
                let s = &mut scores[col * branches * branches..(col + 1) * branches * branches];
                for i in 0..branches {
                    for j in 0..branches {
                        let mut z = T::zero();
                        for c in 0..d {
                            z += qd[(i * d + c) * t + col] * kd[(j * d + c) * t + col];
                        }
                        s[i * branches + j] = z * inv_sqrt_d;
                    }
                    softmax_row_in_place(&mut s[i * branches..(i + 1) * branches]);
                }
                for i in 0..branches {
                    for c in 0..d {
                        let mut acc = T::zero();
                        for j in 0..branches {
                            acc += (s[i * branches + j] + T::one()) * vd[(j * d + c) * t + col];
                        }
                        out[(i * d + c) * t + col] = acc;
                    }
                }
            }
            (Tensor::from_parts(vec![rows, t], out), scores)
        };
        self.push("attention", out, Op::Attention { q, k, v, branches, scores }, &[q, k, v])
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let loss_shape = nodes[loss.0].value.shape().to_vec();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(&loss_shape, T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let mut acc = |var: Var, delta: Tensor<T>| {
                if !nodes[var.0].requires_grad {
                    return;
                }
                match &mut grads[var.0] {
                    Some(existing) => existing
                        .data_mut()
                        .iter_mut()
                        .zip(delta.data())
                        .for_each(|(e, d)| *e += *d),
                    slot @ None => *slot = Some(delta),
                }
            };
            let needs = |var: Var| nodes[var.0].requires_grad;
            let val = |var: Var| &nodes[var.0].value;
            let gd = g.data();

            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (m, k) = val(*a).dims2()?;
                    let n = val(*b).dims2()?.1;
                    if needs(*a) {
                        let mut da = vec![T::zero(); m * k];
                        T::gemm(m, n, k, gd, (n, 1), val(*b).data(), (1, n), T::zero(), &mut da);
                        acc(*a, Tensor::from_parts(vec![m, k], da));
                    }
                    if needs(*b) {
                        let mut db = vec![T::zero(); k * n];
                        T::gemm(k, m, n, val(*a).data(), (1, k), gd, (n, 1), T::zero(), &mut db);
                        acc(*b, Tensor::from_parts(vec![k, n], db));
                    }
                }
                Op::Transpose(a) => acc(*a, g.transpose()?),
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.map(|x| -x));
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        let d = gd.iter().zip(val(*b).data()).map(|(&x, &y)| x * y).collect();
                        acc(*a, Tensor::from_parts(g.shape().to_vec(), d));
                    }
                    if needs(*b) {
                        let d = gd.iter().zip(val(*a).data()).map(|(&x, &y)| x * y).collect();
                        acc(*b, Tensor::from_parts(g.shape().to_vec(), d));
                    }
                }
                Op::Div(a, b) => {
                    let (va, vb) = (val(*a).data(), val(*b).data());
                    if needs(*a) {
                        let d = gd.iter().zip(vb).map(|(&x, &y)| x / y).collect();
                        acc(*a, Tensor::from_parts(g.shape().to_vec(), d));
                    }
                    if needs(*b) {
                        let d = gd
                            .iter()
                            .zip(va.iter().zip(vb))
                            .map(|(&x, (&p, &q))| -x * p / (q * q))
                            .collect();
                        acc(*b, Tensor::from_parts(g.shape().to_vec(), d));
                    }
                }
                Op::Scale(a, factor) => acc(*a, g.map(|x| x * *factor)),
                Op::AddConst(a) => acc(*a, g),
                Op::Relu(a) => {
                    let d = gd
                        .iter()
                        .zip(val(*a).data())
                        .map(|(&x, &inp)| if inp > T::zero() { x } else { T::zero() })
                        .collect();
                    acc(*a, Tensor::from_parts(g.shape().to_vec(), d));
                }
                Op::AddColBias(x, bias) => {
                    if needs(*bias) {
                        let (_, t) = g.dims2()?;
                        let db = gd.chunks(t).map(|row| row.iter().copied().sum()).collect();
                        acc(*bias, Tensor::from_parts(val(*bias).shape().to_vec(), db));
                    }
                    acc(*x, g);
                }
                Op::Expand(a) => acc(*a, Tensor::from_parts(val(*a).shape().to_vec(), vec![g.sum()])),
                Op::Sum(a) => acc(*a, Tensor::full(val(*a).shape(), gd[0])),
                Op::Mean(a) => {
                    let n = T::lit(val(*a).len() as f64);
                    acc(*a, Tensor::full(val(*a).shape(), gd[0] / n));
                }
                Op::Reshape(a) => acc(*a, Tensor::from_parts(val(*a).shape().to_vec(), g.into_data())),
                Op::Concat { inputs, axis } => {
                    let (outer, total, inner) = axis_split(g.shape(), *axis);
                    let mut offset = 0;
                    for &inp in inputs {
                        let shape = val(inp).shape().to_vec();
                        let n = shape[*axis];
                        if needs(inp) {
                            let mut d = Vec::with_capacity(outer * n * inner);
                            for o in 0..outer {
                                let base = (o * total + offset) * inner;
                                d.extend_from_slice(&gd[base..base + n * inner]);
                            }
                            acc(inp, Tensor::from_parts(shape, d));
                        }
                        offset += n;
                    }
                }
                Op::Slice { input, axis, start } => {
                    let shape = val(*input).shape().to_vec();
                    let (outer, n, inner) = axis_split(&shape, *axis);
                    let len = g.shape()[*axis];
                    let mut d = vec![T::zero(); shape.iter().product()];
                    for o in 0..outer {
                        let dst = o * n * inner + start * inner;
                        let src = o * len * inner;
                        d[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                    }
                    acc(*input, Tensor::from_parts(shape, d));
                }
                Op::Im2Col { input, kernel, dilation } => {
                    let (c, t) = val(*input).dims2()?;
                    let pad = (kernel - 1) * dilation;
                    let mut d = vec![T::zero(); c * t];
                    for ch in 0..c {
                        let dst = &mut d[ch * t..(ch + 1) * t];
                        for j in 0..*kernel {
                            let shift = pad - j * dilation;
                            if shift < t {
                                let row = (ch * kernel + j) * t;
                                for (o, &v) in dst[..t - shift].iter_mut().zip(&gd[row + shift..row + t]) {
                                    *o += v;
                                }
                            }
                        }
                    }
                    acc(*input, Tensor::from_parts(vec![c, t], d));
                }
                Op::SoftmaxRows(x) => {
                    let y = node.value.data();
                    let c = g.shape()[1];
                    let mut d = vec![T::zero(); y.len()];
                    for ((drow, yrow), grow) in d.chunks_mut(c).zip(y.chunks(c)).zip(gd.chunks(c)) {
                        let dot: T = yrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                        for ((o, &yi), &gi) in drow.iter_mut().zip(yrow).zip(grow) {
                            *o = yi * (gi - dot);
                        }
                    }
                    acc(*x, Tensor::from_parts(g.shape().to_vec(), d));
                }
                Op::LayerNormCols { x, gain, shift, xhat, inv_std } => {
                    let (f, t) = g.dims2()?;
                    let gv = val(*gain).data();
                    if needs(*gain) {
                        let dg = (0..f)
                            .map(|r| (0..t).map(|c| gd[r * t + c] * xhat[r * t + c]).sum())
                            .collect();
                        acc(*gain, Tensor::from_parts(vec![f], dg));
                    }
                    if needs(*shift) {
                        let ds = gd.chunks(t).map(|row| row.iter().copied().sum()).collect();
                        acc(*shift, Tensor::from_parts(vec![f], ds));
                    }
                    if needs(*x) {
                        let nf = T::lit(f as f64);
                        let mut dx = vec![T::zero(); f * t];
                        for c in 0..t {
                            let mut mean_d = T::zero();
                            let mut mean_dh = T::zero();
                            for r in 0..f {
                                let dh = gd[r * t + c] * gv[r];
                                mean_d += dh;
                                mean_dh += dh * xhat[r * t + c];
                            }
                            mean_d /= nf;
                            mean_dh /= nf;
                            for r in 0..f {
                                let dh = gd[r * t + c] * gv[r];
                                dx[r * t + c] = inv_std[c] * (dh - mean_d - xhat[r * t + c] * mean_dh);
                            }
                        }
                        acc(*x, Tensor::from_parts(vec![f, t], dx));
                    }
                }
                Op::Attention { q, k, v, branches, scores } => {
                    let b = *branches;
                    let (rows, t) = g.dims2()?;
                    let d = rows / b;
                    let inv_sqrt_d = T::one() / T::lit(d as f64).sqrt();
                    let (qd, kd, vd) = (val(*q).data(), val(*k).data(), val(*v).data());
                    let mut dq = vec![T::zero(); rows * t];
                    let mut dk = vec![T::zero(); rows * t];
                    let mut dv = vec![T::zero(); rows * t];
                    let mut ds = vec![T::zero(); b * b];
                    for col in 0..t {
                        let s = &scores[col * b * b..(col + 1) * b * b];
                        let at = |m: &[T], br: usize, c: usize| m[(br * d + c) * t + col];
                        for i in 0..b {
                            for j in 0..b {
                                let w = s[i * b + j] + T::one();
                                let mut dot = T::zero();
                                for c in 0..d {
                                    let ga = at(gd, i, c);
                                    dv[(j * d + c) * t + col] += w * ga;
                                    dot += ga * at(vd, j, c);
                                }
                                ds[i * b + j] = dot;
                            }
                            let inner: T = (0..b).map(|j| s[i * b + j] * ds[i * b + j]).sum();
                            for j in 0..b {
                                let dz = s[i * b + j] * (ds[i * b + j] - inner) * inv_sqrt_d;
                                for c in 0..d {
                                    dq[(i * d + c) * t + col] += dz * at(kd, j, c);
                                    dk[(j * d + c) * t + col] += dz * at(qd, i, c);
                                }
                            }
                        }
                    }
                    acc(*q, Tensor::from_parts(vec![rows, t], dq));
                    acc(*k, Tensor::from_parts(vec![rows, t], dk));
                    acc(*v, Tensor::from_parts(vec![rows, t], dv));
                }
            }
        }

        for (idx, node) in nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                if grads[idx].is_none() {
                    grads[idx] = Some(Tensor::zeros(node.value.shape()));
                }
            } else {
                grads[idx] = None;
            }
        }
        Ok(Gradients { grads })
    }
}
