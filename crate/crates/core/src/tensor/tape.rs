//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its output. Nodes whose inputs are all
//! constants are stored as constants, so a forward pass over frozen weights
//! records no backward work. [`Tape::backward`] walks the tape once in
//! reverse index order, which is a valid reverse topological order because
//! inputs always precede the nodes that consume them.

use std::collections::HashMap;

use super::gemm::gemm;
use super::kernels::{self, ConvDims, WkvGrads};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    LeakyRelu(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Narrow { x: Var, axis: usize, start: usize },
    IndexSelect(Var, Vec<usize>),
    Linear { x: Var, w: Var, b: Option<Var> },
    Matmul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Conv2d { x: Var, w: Var, b: Var },
    ConvTranspose2d { x: Var, w: Var, b: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Softmax(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<T>, probs: Vec<T> },
    WeightedSqErr { a: Var, b: Var, weights: Vec<T> },
    Heatmaps { points: Var, sigma: T },
    Wkv { k: Var, v: Var, decay: Var, first: Var },
    TimeShift(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to the leaves that require them.
pub struct Gradients<T = f32> {
    grads: HashMap<Var, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[derive(Default)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

fn rows_of(shape: &[usize]) -> (usize, usize) {
    let last = shape.last().copied().unwrap_or(1);
    let n: usize = shape.iter().product();
    (if last == 0 { 0 } else { n / last }, last)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Calls `f(out_index, in_index)` for every element of a permuted view.
fn for_each_permuted(shape: &[usize], perm: &[usize], mut f: impl FnMut(usize, usize)) {
    let st = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let n: usize = shape.iter().product();
    let mut idx = vec![0usize; shape.len()];
    for o in 0..n {
        let mut src = 0;
        for (d, &p) in perm.iter().enumerate() {
            src += idx[d] * st[p];
        }
        f(o, src);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant copy of `v`; gradients do not flow through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        if cfg!(debug_assertions) && !value.is_finite() {
            let finite_inputs = inputs.iter().all(|v| self.nodes[v.0].value.is_finite());
            debug_assert!(!finite_inputs, "non-finite output from finite inputs (node {})", self.nodes.len());
        }
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x).map(f);
        self.push(value, op, &[x])
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(self.shape(a).to_vec(), data)
    }

    // ----- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    fn row_check(&self, op: &'static str, x: Var, r: Var) -> Result<usize> {
        let n = self.value(r).len();
        let last = self.shape(x).last().copied().unwrap_or(1);
        if n != last {
            return Err(Error::shape(op, format!("{:?} vs row {:?}", self.shape(x), self.shape(r))));
        }
        Ok(n)
    }

    /// `x + r` with `r` broadcast along every leading dimension of `x`.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let n = self.row_check("add_row", x, r)?;
        let rd = self.data(r);
        let data = self.data(x).iter().enumerate().map(|(i, &v)| v + rd[i % n]).collect();
        let value = Tensor::from_parts(self.shape(x).to_vec(), data);
        Ok(self.push(value, Op::AddRow(x, r), &[x, r]))
    }

    /// `x * r` with `r` broadcast along every leading dimension of `x`.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let n = self.row_check("mul_row", x, r)?;
        let rd = self.data(r);
        let data = self.data(x).iter().enumerate().map(|(i, &v)| v * rd[i % n]).collect();
        let value = Tensor::from_parts(self.shape(x).to_vec(), data);
        Ok(self.push(value, Op::MulRow(x, r), &[x, r]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let neg = self.scale(x, -T::one());
        self.add_scalar(neg, T::one())
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        self.unary(x, |v| if v > T::zero() { v } else { v * slope }, Op::LeakyRelu(x, slope))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| T::one() / (T::one() + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    // ----- reductions ---------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::from_usize(self.value(x).len().max(1)).unwrap();
        let s: T = self.data(x).iter().copied().sum();
        self.push(Tensor::scalar(s / n), Op::Mean(x), &[x])
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let shape = self.shape(a);
        let rows = shape.first().copied().unwrap_or(1).max(1);
        let w = T::one() / T::from_usize(self.value(a).len().max(1)).unwrap();
        self.weighted_sq_err(a, b, vec![w; rows])
    }

    /// `sum_r weights[r] * sum_d (a[r, d] - b[r, d])^2`, rows along the first axis.
    pub fn weighted_sq_err(&mut self, a: Var, b: Var, weights: Vec<T>) -> Result<Var> {
        self.same_shape("weighted_sq_err", a, b)?;
        let rows = self.shape(a).first().copied().unwrap_or(1);
        if weights.len() != rows.max(1) {
            return Err(Error::shape(
                "weighted_sq_err",
                format!("{} weights for shape {:?}", weights.len(), self.shape(a)),
            ));
        }
        let n = self.value(a).len();
        let d = if rows == 0 { 0 } else { n / rows.max(1) };
        let (ad, bd) = (self.data(a), self.data(b));
        let mut total = T::zero();
        for (r, &w) in weights.iter().enumerate() {
            let mut s = T::zero();
            for i in r * d..(r + 1) * d {
                let e = ad[i] - bd[i];
                s += e * e;
            }
            total += w * s;
        }
        Ok(self.push(Tensor::scalar(total), Op::WeightedSqErr { a, b, weights }, &[a, b]))
    }

    /// Weighted sum of per-row cross-entropies between `logits` (`[rows, classes]`)
    /// and integer targets.
    pub fn cross_entropy_weighted(&mut self, logits: Var, targets: &[usize], weights: Vec<T>) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() || weights.len() != targets.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {:?} vs {} targets / {} weights", shape, targets.len(), weights.len()),
            ));
        }
        let classes = shape[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::TokenOutOfRange { id: bad, size: classes });
        }
        let ld = self.data(logits);
        let mut probs = vec![T::zero(); ld.len()];
        let mut total = T::zero();
        for (r, (&t, &w)) in targets.iter().zip(&weights).enumerate() {
            let row = &ld[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (p, &l) in probs[r * classes..(r + 1) * classes].iter_mut().zip(row) {
                *p = (l - max).exp();
                z += *p;
            }
            for p in probs[r * classes..(r + 1) * classes].iter_mut() {
                *p /= z;
            }
            total += w * (z.ln() + max - row[t]);
        }
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), weights, probs };
        Ok(self.push(Tensor::scalar(total), op, &[logits]))
    }

    /// Mean cross-entropy over rows.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let w = T::one() / T::from_usize(targets.len().max(1)).unwrap();
        self.cross_entropy_weighted(logits, targets, vec![w; targets.len()])
    }

    // ----- shape ------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("{shape:?} by {perm:?}")));
        }
        let src = self.data(x);
        let mut out = vec![T::zero(); src.len()];
        for_each_permuted(&shape, perm, |o, i| out[o] = src[i]);
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::Permute(x, perm.to_vec()), &[x]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {first:?}")));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let ok = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", format!("{first:?} vs {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let chunk = self.shape(x)[axis] * inner;
                out.extend_from_slice(&self.data(x)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat(xs.to_vec(), axis), xs))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape("narrow", format!("{shape:?} axis {axis} [{start}, {})", start + len)));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::Narrow { x, axis, start }, &[x]))
    }

    /// Gathers slices along the first axis; indices may repeat.
    pub fn index_select(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rows = *shape.first().ok_or_else(|| Error::shape("index_select", "scalar input"))?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("index_select", format!("index {bad} for {shape:?}")));
        }
        let inner: usize = shape[1..].iter().product();
        let src = self.data(x);
        let mut out = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            out.extend_from_slice(&src[i * inner..(i + 1) * inner]);
        }
        let mut out_shape = shape;
        out_shape[0] = indices.len();
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::IndexSelect(x, indices.to_vec()), &[x]))
    }

    // ----- linear algebra ----------------------------------------------

    /// `x W^T + b` over the last dimension of `x`; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (rows, inp) = rows_of(&xs);
        if ws.len() != 2 || ws[1] != inp {
            return Err(Error::shape("linear", format!("input {xs:?} vs weight {ws:?}")));
        }
        let out_dim = ws[0];
        if let Some(b) = b {
            if self.shape(b) != [out_dim] {
                return Err(Error::shape("linear", format!("weight {ws:?} vs bias {:?}", self.shape(b))));
            }
        }
        let mut out = vec![T::zero(); rows * out_dim];
        gemm(rows, inp, out_dim, self.data(x), false, self.data(w), true, &mut out, T::zero());
        if let Some(b) = b {
            let bd = self.data(b);
            for row in out.chunks_mut(out_dim.max(1)) {
                for (o, &bv) in row.iter_mut().zip(bd) {
                    *o += bv;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = out_dim;
        let inputs: Vec<Var> = std::iter::once(x).chain(std::iter::once(w)).chain(b).collect();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Linear { x, w, b }, &inputs))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} vs {sb:?}")));
        }
        let mut out = vec![T::zero(); sa[0] * sb[1]];
        gemm(sa[0], sa[1], sb[1], self.data(a), false, self.data(b), false, &mut out, T::zero());
        Ok(self.push(Tensor::from_parts(vec![sa[0], sb[1]], out), Op::Matmul(a, b), &[a, b]))
    }

    /// Batched matrix product `[B, m, k] x [B, k, n]`, or `[B, m, k] x [B, n, k]^T`
    /// when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == if trans_b { sb[2] } else { sb[1] };
        if !ok {
            return Err(Error::shape("bmm", format!("{sa:?} vs {sb:?} (trans_b={trans_b})")));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![T::zero(); batch * m * n];
        let (ad, bd) = (self.data(a), self.data(b));
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &ad[i * m * k..(i + 1) * m * k],
                false,
                &bd[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                T::zero(),
            );
        }
        Ok(self.push(Tensor::from_parts(vec![batch, m, n], out), Op::Bmm { a, b, trans_b }, &[a, b]))
    }

    // ----- neural network primitives --------------------------------------

    fn conv_dims(&self, op: &'static str, x: Var, w: Var, b: Var, transposed: bool) -> Result<ConvDims> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        let err = || Error::shape(op, format!("input {xs:?} vs weight {ws:?} / bias {bs:?}"));
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] {
            return Err(err());
        }
        let (c_in, c_out) = if transposed { (ws[0], ws[1]) } else { (ws[1], ws[0]) };
        if xs[1] != c_in || bs != [c_out] {
            return Err(err());
        }
        let k = ws[2];
        if !transposed && (xs[2] < k || xs[3] < k) {
            return Err(err());
        }
        Ok(ConvDims { n: xs[0], c_in, c_out, h: xs[2], w: xs[3], k })
    }

    /// Valid, stride-1 2-D convolution. `x` is `[N, C, H, W]`, `w` is `[O, C, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let d = self.conv_dims("conv2d", x, w, b, false)?;
        let out = kernels::conv2d_forward(self.data(x), self.data(w), self.data(b), &d);
        let shape = vec![d.n, d.c_out, d.h + 1 - d.k, d.w + 1 - d.k];
        Ok(self.push(Tensor::from_parts(shape, out), Op::Conv2d { x, w, b }, &[x, w, b]))
    }

    /// Stride-1 transposed convolution. `x` is `[N, C, H, W]`, `w` is `[C, O, k, k]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let d = self.conv_dims("conv_transpose2d", x, w, b, true)?;
        let out = kernels::conv_transpose2d_forward(self.data(x), self.data(w), self.data(b), &d);
        let shape = vec![d.n, d.c_out, d.h + d.k - 1, d.w + d.k - 1];
        Ok(self.push(Tensor::from_parts(shape, out), Op::ConvTranspose2d { x, w, b }, &[x, w, b]))
    }

    /// Layer normalisation over the last dimension with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (rows, n) = rows_of(&xs);
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(Error::shape(
                "layer_norm",
                format!("input {xs:?} vs gain {:?} / bias {:?}", self.shape(gain), self.shape(bias)),
            ));
        }
        let (xd, gd, bd) = (self.data(x), self.data(gain), self.data(bias));
        let nt = T::from_usize(n).unwrap();
        let mut xhat = vec![T::zero(); rows * n];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * n];
        for r in 0..rows {
            let row = &xd[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gd[j] + bd[j];
            }
        }
        let op = Op::LayerNorm { x, gain, bias, xhat, rstd };
        Ok(self.push(Tensor::from_parts(xs, out), op, &[x, gain, bias]))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (_, n) = rows_of(&xs);
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(n.max(1)) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        self.push(Tensor::from_parts(xs, out), Op::Softmax(x), &[x])
    }

    /// Isotropic Gaussian bumps on a `[0, 1]^2` grid. `points` holds `(x, y)`
    /// pairs, shaped `[N, 2K]` or `[N, K, 2]`; the result is `[N, K, h, w]`.
    pub fn gaussian_heatmaps(&mut self, points: Var, h: usize, w: usize, sigma: T) -> Result<Var> {
        let ps = self.shape(points).to_vec();
        let n = *ps.first().ok_or_else(|| Error::shape("gaussian_heatmaps", "scalar input"))?;
        let per: usize = ps[1..].iter().product();
        if per % 2 != 0 || h < 2 || w < 2 {
            return Err(Error::shape("gaussian_heatmaps", format!("points {ps:?} on {h}x{w}")));
        }
        let k = per / 2;
        let pd = self.data(points);
        let inv = T::one() / (T::from_f64_lossy(2.0) * sigma * sigma);
        let (hm1, wm1) = (T::from_usize(h - 1).unwrap(), T::from_usize(w - 1).unwrap());
        let mut out = vec![T::zero(); n * k * h * w];
        for i in 0..n * k {
            let (px, py) = (pd[2 * i], pd[2 * i + 1]);
            let plane = &mut out[i * h * w..(i + 1) * h * w];
            for y in 0..h {
                let dy = T::from_usize(y).unwrap() / hm1 - py;
                for x in 0..w {
                    let dx = T::from_usize(x).unwrap() / wm1 - px;
                    plane[y * w + x] = (-(dx * dx + dy * dy) * inv).exp();
                }
            }
        }
        let op = Op::Heatmaps { points, sigma };
        Ok(self.push(Tensor::from_parts(vec![n, k, h, w], out), op, &[points]))
    }

    /// RWKV weighted key-value mixing over `[B, T, C]` keys and values.
    pub fn wkv(&mut self, k: Var, v: Var, decay: Var, first: Var) -> Result<Var> {
        let ks = self.shape(k).to_vec();
        if ks.len() != 3 || self.shape(v) != ks.as_slice() || self.shape(decay) != [ks[2]] || self.shape(first) != [ks[2]] {
            return Err(Error::shape(
                "wkv",
                format!("k {ks:?} v {:?} decay {:?} first {:?}", self.shape(v), self.shape(decay), self.shape(first)),
            ));
        }
        let y = kernels::wkv_forward(self.data(k), self.data(v), self.data(decay), self.data(first), ks[0], ks[1], ks[2]);
        Ok(self.push(Tensor::from_parts(ks, y), Op::Wkv { k, v, decay, first }, &[k, v, decay, first]))
    }

    /// Shifts `[B, T, C]` one step along time, filling `t = 0` with zeros.
    pub fn time_shift(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::shape("time_shift", format!("{s:?}")));
        }
        let (b, t, c) = (s[0], s[1], s[2]);
        let src = self.data(x);
        let mut out = vec![T::zero(); src.len()];
        for bi in 0..b {
            for ti in 1..t {
                let d = (bi * t + ti) * c;
                let o = (bi * t + ti - 1) * c;
                out[d..d + c].copy_from_slice(&src[o..o + c]);
            }
        }
        Ok(self.push(Tensor::from_parts(s, out), Op::TimeShift(x), &[x]))
    }

    // ----- backward ------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Returns gradients for every leaf
    /// that requires them; intermediate gradients are dropped as soon as
    /// they have been propagated.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let value = self.value(loss);
        if value.len() != 1 {
            return Err(Error::NotScalar(value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        let mut leaves = HashMap::new();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                if node.requires_grad {
                    leaves.insert(Var(i), Tensor::from_parts(node.value.shape().to_vec(), g));
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(Gradients { grads: leaves })
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        let val = |v: Var| nodes[v.0].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(nodes, grads, *a, |ga| add_into(ga, g));
                accumulate(nodes, grads, *b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                accumulate(nodes, grads, *a, |ga| add_into(ga, g));
                accumulate(nodes, grads, *b, |gb| {
                    for (o, &v) in gb.iter_mut().zip(g) {
                        *o -= v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a), val(*b));
                accumulate(nodes, grads, *a, |ga| {
                    for ((o, &gv), &bv) in ga.iter_mut().zip(g).zip(bd) {
                        *o += gv * bv;
                    }
                });
                accumulate(nodes, grads, *b, |gb| {
                    for ((o, &gv), &av) in gb.iter_mut().zip(g).zip(ad) {
                        *o += gv * av;
                    }
                });
            }
            Op::AddRow(x, r) => {
                let n = nodes[r.0].value.len();
                accumulate(nodes, grads, *x, |gx| add_into(gx, g));
                accumulate(nodes, grads, *r, |gr| {
                    for (i, &gv) in g.iter().enumerate() {
                        gr[i % n] += gv;
                    }
                });
            }
            Op::MulRow(x, r) => {
                let n = nodes[r.0].value.len();
                let (xd, rd) = (val(*x), val(*r));
                accumulate(nodes, grads, *x, |gx| {
                    for (i, (o, &gv)) in gx.iter_mut().zip(g).enumerate() {
                        *o += gv * rd[i % n];
                    }
                });
                accumulate(nodes, grads, *r, |gr| {
                    for (i, (&gv, &xv)) in g.iter().zip(xd).enumerate() {
                        gr[i % n] += gv * xv;
                    }
                });
            }
            Op::Scale(x, c) => accumulate(nodes, grads, *x, |gx| {
                for (o, &gv) in gx.iter_mut().zip(g) {
                    *o += gv * *c;
                }
            }),
            Op::AddScalar(x) | Op::Reshape(x) => accumulate(nodes, grads, *x, |gx| add_into(gx, g)),
            Op::LeakyRelu(x, slope) => {
                let xd = val(*x);
                accumulate(nodes, grads, *x, |gx| {
                    for ((o, &gv), &xv) in gx.iter_mut().zip(g).zip(xd) {
                        *o += if xv > T::zero() { gv } else { gv * *slope };
                    }
                });
            }
            Op::Relu(x) => {
                let xd = val(*x);
                accumulate(nodes, grads, *x, |gx| {
                    for ((o, &gv), &xv) in gx.iter_mut().zip(g).zip(xd) {
                        if xv > T::zero() {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => accumulate(nodes, grads, *x, |gx| {
                for ((o, &gv), &y) in gx.iter_mut().zip(g).zip(out.data()) {
                    *o += gv * y * (T::one() - y);
                }
            }),
            Op::Tanh(x) => accumulate(nodes, grads, *x, |gx| {
                for ((o, &gv), &y) in gx.iter_mut().zip(g).zip(out.data()) {
                    *o += gv * (T::one() - y * y);
                }
            }),
            Op::Exp(x) => accumulate(nodes, grads, *x, |gx| {
                for ((o, &gv), &y) in gx.iter_mut().zip(g).zip(out.data()) {
                    *o += gv * y;
                }
            }),
            Op::Square(x) => {
                let xd = val(*x);
                let two = T::one() + T::one();
                accumulate(nodes, grads, *x, |gx| {
                    for ((o, &gv), &xv) in gx.iter_mut().zip(g).zip(xd) {
                        *o += two * gv * xv;
                    }
                });
            }
            Op::Sum(x) => accumulate(nodes, grads, *x, |gx| {
                for o in gx.iter_mut() {
                    *o += g[0];
                }
            }),
            Op::Mean(x) => {
                let n = T::from_usize(nodes[x.0].value.len().max(1)).unwrap();
                accumulate(nodes, grads, *x, |gx| {
                    for o in gx.iter_mut() {
                        *o += g[0] / n;
                    }
                });
            }
            Op::Permute(x, perm) => {
                let shape = nodes[x.0].value.shape().to_vec();
                accumulate(nodes, grads, *x, |gx| for_each_permuted(&shape, perm, |o, s| gx[s] += g[o]));
            }
            Op::Concat(xs, axis) => {
                let axis = *axis;
                let shape = out.shape();
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[axis] * inner;
                let mut offset = 0;
                for &x in xs {
                    let chunk = nodes[x.0].value.shape()[axis] * inner;
                    accumulate(nodes, grads, x, |gx| {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            add_into(&mut gx[o * chunk..(o + 1) * chunk], src);
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Narrow { x, axis, start } => {
                let shape = nodes[x.0].value.shape().to_vec();
                let len = out.shape()[*axis];
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                accumulate(nodes, grads, *x, |gx| {
                    for o in 0..outer {
                        let base = (o * shape[*axis] + start) * inner;
                        add_into(&mut gx[base..base + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                    }
                });
            }
            Op::IndexSelect(x, idx) => {
                let inner: usize = nodes[x.0].value.shape()[1..].iter().product();
                accumulate(nodes, grads, *x, |gx| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut gx[i * inner..(i + 1) * inner], &g[r * inner..(r + 1) * inner]);
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let (rows, inp) = rows_of(nodes[x.0].value.shape());
                let out_dim = nodes[w.0].value.shape()[0];
                let (xd, wd) = (val(*x), val(*w));
                accumulate(nodes, grads, *x, |gx| gemm(rows, out_dim, inp, g, false, wd, false, gx, T::one()));
                accumulate(nodes, grads, *w, |gw| gemm(out_dim, rows, inp, g, true, xd, false, gw, T::one()));
                if let Some(b) = b {
                    accumulate(nodes, grads, *b, |gb| {
                        for row in g.chunks(out_dim.max(1)) {
                            add_into(gb, row);
                        }
                    });
                }
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (ad, bd) = (val(*a), val(*b));
                accumulate(nodes, grads, *a, |ga| gemm(m, n, k, g, false, bd, true, ga, T::one()));
                accumulate(nodes, grads, *b, |gb| gemm(k, m, n, ad, true, g, false, gb, T::one()));
            }
            Op::Bmm { a, b, trans_b } => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = if *trans_b { sb[1] } else { sb[2] };
                let (ad, bd) = (val(*a), val(*b));
                accumulate(nodes, grads, *a, |ga| {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bd[i * k * n..(i + 1) * k * n];
                        // trans_b: b is [n, k] so dA = dC * B; otherwise dA = dC * B^T
                        gemm(m, n, k, gi, false, bi, !*trans_b, &mut ga[i * m * k..(i + 1) * m * k], T::one());
                    }
                });
                accumulate(nodes, grads, *b, |gb| {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &ad[i * m * k..(i + 1) * m * k];
                        let dst = &mut gb[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            gemm(n, m, k, gi, true, ai, false, dst, T::one());
                        } else {
                            gemm(k, m, n, ai, true, gi, false, dst, T::one());
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b } | Op::ConvTranspose2d { x, w, b } => {
                let transposed = matches!(nodes[i].op, Op::ConvTranspose2d { .. });
                let (xs, ws) = (nodes[x.0].value.shape(), nodes[w.0].value.shape());
                let (c_in, c_out) = if transposed { (ws[0], ws[1]) } else { (ws[1], ws[0]) };
                let d = ConvDims { n: xs[0], c_in, c_out, h: xs[2], w: xs[3], k: ws[2] };
                let (xd, wd) = (val(*x), val(*w));
                let mut gx = take_grad(nodes, grads, *x);
                let mut gw = take_grad(nodes, grads, *w);
                let mut gb = take_grad(nodes, grads, *b);
                let f = if transposed { kernels::conv_transpose2d_backward } else { kernels::conv2d_backward };
                f(xd, wd, g, &d, gx.as_deref_mut(), gw.as_deref_mut(), gb.as_deref_mut());
                restore(grads, *x, gx);
                restore(grads, *w, gw);
                restore(grads, *b, gb);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let n = nodes[gain.0].value.len();
                let gd = val(*gain);
                accumulate(nodes, grads, *x, |gx| {
                    let nt = T::from_usize(n).unwrap();
                    let mut dxhat = vec![T::zero(); n];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let (mut m1, mut m2) = (T::zero(), T::zero());
                        for j in 0..n {
                            dxhat[j] = g[r * n + j] * gd[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * xhat[r * n + j];
                        }
                        m1 /= nt;
                        m2 /= nt;
                        for j in 0..n {
                            gx[r * n + j] += rs * (dxhat[j] - m1 - xhat[r * n + j] * m2);
                        }
                    }
                });
                accumulate(nodes, grads, *gain, |gg| {
                    for (idx, (&gv, &h)) in g.iter().zip(xhat).enumerate() {
                        gg[idx % n] += gv * h;
                    }
                });
                accumulate(nodes, grads, *bias, |gb| {
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Softmax(x) => {
                let (_, n) = rows_of(out.shape());
                accumulate(nodes, grads, *x, |gx| {
                    for ((gr, yr), dst) in g.chunks(n).zip(out.data().chunks(n)).zip(gx.chunks_mut(n)) {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((o, &gv), &y) in dst.iter_mut().zip(gr).zip(yr) {
                            *o += y * (gv - dot);
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let classes = nodes[logits.0].value.shape()[1];
                accumulate(nodes, grads, *logits, |gl| {
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        let s = g[0] * w;
                        for j in 0..classes {
                            gl[r * classes + j] += s * probs[r * classes + j];
                        }
                        gl[r * classes + t] -= s;
                    }
                });
            }
            Op::WeightedSqErr { a, b, weights } => {
                let n = nodes[a.0].value.len();
                let d = n / weights.len().max(1);
                let (ad, bd) = (val(*a), val(*b));
                let two = T::one() + T::one();
                let diff = |idx: usize| two * g[0] * weights[idx / d.max(1)] * (ad[idx] - bd[idx]);
                accumulate(nodes, grads, *a, |ga| {
                    for (idx, o) in ga.iter_mut().enumerate() {
                        *o += diff(idx);
                    }
                });
                accumulate(nodes, grads, *b, |gb| {
                    for (idx, o) in gb.iter_mut().enumerate() {
                        *o -= diff(idx);
                    }
                });
            }
            Op::Heatmaps { points, sigma } => {
                let s = out.shape();
                let (h, w) = (s[2], s[3]);
                let pd = val(*points);
                let inv_s2 = T::one() / (*sigma * *sigma);
                let (hm1, wm1) = (T::from_usize(h - 1).unwrap(), T::from_usize(w - 1).unwrap());
                accumulate(nodes, grads, *points, |gp| {
                    for i in 0..s[0] * s[1] {
                        let (px, py) = (pd[2 * i], pd[2 * i + 1]);
                        let (mut dx, mut dy) = (T::zero(), T::zero());
                        for y in 0..h {
                            let ey = T::from_usize(y).unwrap() / hm1 - py;
                            for x in 0..w {
                                let idx = i * h * w + y * w + x;
                                let ex = T::from_usize(x).unwrap() / wm1 - px;
                                let c = g[idx] * out.data()[idx] * inv_s2;
                                dx += c * ex;
                                dy += c * ey;
                            }
                        }
                        gp[2 * i] += dx;
                        gp[2 * i + 1] += dy;
                    }
                });
            }
            Op::Wkv { k, v, decay, first } => {
                let s = out.shape();
                let mut gk = take_grad(nodes, grads, *k);
                let mut gv = take_grad(nodes, grads, *v);
                let mut gd = take_grad(nodes, grads, *decay);
                let mut gf = take_grad(nodes, grads, *first);
                kernels::wkv_backward(
                    val(*k),
                    val(*v),
                    val(*decay),
                    val(*first),
                    out.data(),
                    g,
                    s[0],
                    s[1],
                    s[2],
                    WkvGrads {
                        k: gk.as_deref_mut(),
                        v: gv.as_deref_mut(),
                        decay: gd.as_deref_mut(),
                        first: gf.as_deref_mut(),
                    },
                );
                restore(grads, *k, gk);
                restore(grads, *v, gv);
                restore(grads, *decay, gd);
                restore(grads, *first, gf);
            }
            Op::TimeShift(x) => {
                let s = out.shape();
                let (b, t, c) = (s[0], s[1], s[2]);
                accumulate(nodes, grads, *x, |gx| {
                    for bi in 0..b {
                        for ti in 1..t {
                            let d = (bi * t + ti) * c;
                            let o = (bi * t + ti - 1) * c;
                            add_into(&mut gx[o..o + c], &g[d..d + c]);
                        }
                    }
                });
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (o, &v) in dst.iter_mut().zip(src) {
        *o += v;
    }
}

fn accumulate<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let len = nodes[v.0].value.len();
    let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
    f(buf);
}

fn take_grad<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], v: Var) -> Option<Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].take().unwrap_or_else(|| vec![T::zero(); len]))
}

fn restore<T>(grads: &mut [Option<Vec<T>>], v: Var, g: Option<Vec<T>>) {
    if g.is_some() {
        grads[v.0] = g;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::from_slice(shape, data).unwrap()
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape: Tape = Tape::new();
        let w = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn leaves_without_requires_grad_get_nothing() {
        let mut tape: Tape = Tape::new();
        let w = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let c = tape.leaf(t(&[2], &[3.0, 4.0]), false);
        let p = tape.mul(w, c).unwrap();
        let loss = tape.sum(p);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(w).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape: Tape = Tape::new();
        let w = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let y = tape.scale(w, 2.0);
        assert!(matches!(tape.backward(y), Err(Error::NotScalar(_))));
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut tape: Tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        let msg = tape.add(a, b).unwrap_err().to_string();
        assert!(msg.contains("add") && msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn constant_only_ops_record_no_backward() {
        let mut tape: Tape = Tape::new();
        let a = tape.constant(Tensor::full(&[4], 1.0));
        let b = tape.exp(a);
        assert!(!tape.requires_grad(b));
    }

    #[test]
    fn leaky_relu_definition() {
        let mut tape: Tape = Tape::new();
        let x = tape.constant(t(&[4], &[0.0, 2.0, -1.0, 0.5]));
        let y = tape.leaky_relu(x, 0.01);
        assert_eq!(tape.value(y).data(), &[0.0, 2.0, -0.01, 0.5]);
    }

    #[test]
    fn uniform_logits_cross_entropy_is_log_classes() {
        let mut tape: Tape = Tape::new();
        let w = 7;
        let logits = tape.constant(Tensor::full(&[3, w], 0.25));
        let loss = tape.cross_entropy(logits, &[0, 3, 6]).unwrap();
        assert!((tape.value(loss).item() - (w as f32).ln()).abs() < 1e-6);
    }

    #[test]
    fn conv_shape_follows_valid_padding() {
        let mut tape: Tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 64, 64]));
        let w = tape.constant(Tensor::zeros(&[18, 3, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[18]));
        let y = tape.conv2d(x, w, b).unwrap();
        assert_eq!(tape.shape(y), &[1, 18, 62, 62]);
        let wt = tape.constant(Tensor::zeros(&[18, 3, 3, 3]));
        let bt = tape.constant(Tensor::zeros(&[3]));
        let z = tape.conv_transpose2d(y, wt, bt).unwrap();
        assert_eq!(tape.shape(z), &[1, 3, 64, 64]);
    }

    #[test]
    fn permute_then_inverse_is_identity() {
        let mut tape: Tape = Tape::new();
        let data: Vec<f32> = (0..24).map(|i| i as f32).collect();
        let x = tape.constant(t(&[2, 3, 4], &data));
        let y = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(y), &[4, 2, 3]);
        let z = tape.permute(y, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(z).data(), data.as_slice());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape: Tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, -5.0, 0.0, 5.0]));
        let y = tape.softmax(x);
        for row in tape.value(y).data().chunks(3) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }
}
