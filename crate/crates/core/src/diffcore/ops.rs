//! Differentiable operations: forward constructors on [`Var`] and the
//! matching reverse rules.

use std::rc::Rc;

use super::graph::{Node, NodeId, Op, Var};
use super::kernels;
use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
    Sigmoid,
    Log,
    Gelu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Mean,
    Sum,
}

/// Dispatches one of the elementwise kinds; binary kinds require `b`.
pub fn elementwise<'g, T: Scalar>(
    kind: ElementwiseKind,
    a: Var<'g, T>,
    b: Option<Var<'g, T>>,
) -> Result<Var<'g, T>> {
    let need_b = || b.ok_or_else(|| Error::Shape(format!("{kind:?} needs two operands")));
    match kind {
        ElementwiseKind::Add => a.add(need_b()?),
        ElementwiseKind::Sub => a.sub(need_b()?),
        ElementwiseKind::Mul => a.mul(need_b()?),
        ElementwiseKind::Sigmoid => Ok(a.sigmoid()),
        ElementwiseKind::Log => a.log(),
        ElementwiseKind::Gelu => Ok(a.gelu()),
    }
}

/// Result shape of a binary op. Shapes broadcast only by trailing-axis
/// alignment: one shape must be a suffix of the other.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.ends_with(b) {
        Ok(a.to_vec())
    } else if b.ends_with(a) {
        Ok(b.to_vec())
    } else {
        shape_err(format!("cannot broadcast {a:?} with {b:?}"))
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    fn unary(self, op: Op<T>, f: impl Fn(T) -> T) -> Var<'g, T> {
        let a = self.value();
        let out = a.map(f);
        self.graph.push(Rc::new(out), op, self.requires_grad())
    }

    fn binary(self, other: Var<'g, T>, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape(a.shape(), b.shape())?;
        let n: usize = shape.iter().product();
        let (ad, bd) = (a.data(), b.data());
        let data: Vec<T> = if ad.len() == bd.len() {
            ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
        } else {
            (0..n)
                .map(|i| f(ad[i % ad.len()], bd[i % bd.len()]))
                .collect()
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.graph.push(Rc::new(Tensor::new(shape, data)?), op, rg))
    }

    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, Op::Add(self.id, other.id), |x, y| x + y)
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, Op::Sub(self.id, other.id), |x, y| x - y)
    }

    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, Op::Mul(self.id, other.id), |x, y| x * y)
    }

    pub fn square(self) -> Var<'g, T> {
        self.mul(self).expect("same shape")
    }

    pub fn scale(self, s: T) -> Var<'g, T> {
        self.unary(Op::Scale(self.id, s), |x| x * s)
    }

    pub fn neg(self) -> Var<'g, T> {
        self.scale(-T::one())
    }

    pub fn add_scalar(self, s: T) -> Var<'g, T> {
        self.unary(Op::AddScalar(self.id), |x| x + s)
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        self.unary(Op::Sigmoid(self.id), kernels::sigmoid)
    }

    /// Natural log; every input must be strictly positive.
    pub fn log(self) -> Result<Var<'g, T>> {
        let a = self.value();
        if let Some(bad) = a.data().iter().find(|&&v| !(v > T::zero())) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        Ok(self.unary(Op::Log(self.id), |x| x.ln()))
    }

    pub fn gelu(self) -> Var<'g, T> {
        self.unary(Op::Gelu(self.id), kernels::gelu)
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(self, lo: T, hi: T) -> Var<'g, T> {
        self.unary(Op::Clamp { a: self.id, lo, hi }, |x| x.max(lo).min(hi))
    }

    pub fn matmul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        let [m, k] = a.dims2()?;
        let [k2, n] = b.dims2()?;
        if k != k2 {
            return shape_err(format!("matmul inner extents differ: {m}x{k} * {k2}x{n}"));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_acc(a.data(), b.data(), &mut out, m, k, n);
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.graph.push(
            Rc::new(Tensor::new([m, n], out)?),
            Op::MatMul(self.id, other.id),
            rg,
        ))
    }

    /// `x @ w + b` for `x: [n x in]`, `w: [in x out]`, `b: [out]`.
    pub fn linear(self, w: Var<'g, T>, b: Var<'g, T>) -> Result<Var<'g, T>> {
        self.matmul(w)?.add(b)
    }

    /// Normalizes over the last axis, then applies `gamma * xhat + beta`.
    pub fn layer_norm(self, gamma: Var<'g, T>, beta: Var<'g, T>, eps: T) -> Result<Var<'g, T>> {
        let x = self.value();
        let c = *x
            .shape()
            .last()
            .ok_or_else(|| Error::Shape("layer_norm of a scalar".into()))?;
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.shape() != [c] || bv.shape() != [c] {
            return shape_err(format!(
                "layer_norm affine shapes {:?}/{:?} do not match last extent {c}",
                gv.shape(),
                bv.shape()
            ));
        }
        let rows = x.numel() / c;
        let cf = T::from_usize(c).unwrap();
        let mut xhat = vec![T::zero(); x.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); x.numel()];
        for r in 0..rows {
            let row = &x.data()[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() / cf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        let op = Op::LayerNorm {
            x: self.id,
            gamma: gamma.id,
            beta: beta.id,
            xhat,
            rstd,
        };
        Ok(self
            .graph
            .push(Rc::new(Tensor::new(x.shape().to_vec(), out)?), op, rg))
    }

    /// Sum or mean over the given axes (removed from the result shape).
    pub fn reduce(self, kind: ReduceKind, axes: &[usize]) -> Result<Var<'g, T>> {
        let a = self.value();
        let shape = a.shape();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if let Some(&bad) = axes.iter().find(|&&ax| ax >= shape.len()) {
            return shape_err(format!("axis {bad} out of range for shape {shape:?}"));
        }
        let (out_shape, map) = reduce_index_map(shape, &axes);
        let count: usize = axes.iter().map(|&ax| shape[ax]).product();
        let mut out = vec![T::zero(); out_shape.iter().product()];
        for (i, &v) in a.data().iter().enumerate() {
            out[map[i]] += v;
        }
        let mean = kind == ReduceKind::Mean;
        if mean {
            let inv = T::one() / T::from_usize(count).unwrap();
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let op = Op::Reduce {
            a: self.id,
            mean,
            axes,
        };
        Ok(self.graph.push(
            Rc::new(Tensor::new(out_shape, out)?),
            op,
            self.requires_grad(),
        ))
    }

    pub fn sum_all(self) -> Var<'g, T> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.reduce(ReduceKind::Sum, &axes).expect("valid axes")
    }

    pub fn mean_all(self) -> Var<'g, T> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.reduce(ReduceKind::Mean, &axes).expect("valid axes")
    }

    /// Cosine similarity of two equally sized tensors read as flat vectors.
    /// Each norm is floored at `eps` in the denominator.
    pub fn cosine_similarity(self, other: Var<'g, T>, eps: T) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        if a.numel() != b.numel() {
            return shape_err(format!("cosine of {:?} vs {:?}", a.shape(), b.shape()));
        }
        let (ad, bd) = (a.data(), b.data());
        let d = kernels::dot(ad, bd);
        let na = kernels::dot(ad, ad).sqrt().max(eps);
        let nb = kernels::dot(bd, bd).sqrt().max(eps);
        let rg = self.requires_grad() || other.requires_grad();
        let op = Op::Cosine {
            a: self.id,
            b: other.id,
            eps,
        };
        Ok(self
            .graph
            .push(Rc::new(Tensor::scalar(d / (na * nb))), op, rg))
    }

    /// Inverted dropout. In training mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1 / (1 - rate)`.
    /// Evaluation mode and `rate == 0` return `self` unchanged.
    pub fn dropout(self, rate: f64, training: bool, rng: &mut Rng) -> Result<Var<'g, T>> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Domain(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(self);
        }
        let a = self.value();
        let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..a.numel())
            .map(|_| {
                if rng.uniform() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let out: Vec<T> = a.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let op = Op::Dropout { a: self.id, mask };
        Ok(self.graph.push(
            Rc::new(Tensor::new(a.shape().to_vec(), out)?),
            op,
            self.requires_grad(),
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, T>> {
        let out = self.value().reshape(shape.to_vec())?;
        Ok(self
            .graph
            .push(Rc::new(out), Op::Reshape(self.id), self.requires_grad()))
    }

    pub fn transpose(self) -> Result<Var<'g, T>> {
        let out = self.value().transpose2()?;
        Ok(self
            .graph
            .push(Rc::new(out), Op::Transpose(self.id), self.requires_grad()))
    }

    /// Rows `start..end` along axis 0.
    pub fn slice_rows(self, start: usize, end: usize) -> Result<Var<'g, T>> {
        let a = self.value();
        let shape = a.shape();
        if shape.is_empty() || start >= end || end > shape[0] {
            return shape_err(format!("row slice {start}..{end} of {shape:?}"));
        }
        let inner: usize = shape[1..].iter().product();
        let data = a.data()[start * inner..end * inner].to_vec();
        let mut out_shape = shape.to_vec();
        out_shape[0] = end - start;
        let op = Op::SliceRows { a: self.id, start };
        Ok(self.graph.push(
            Rc::new(Tensor::new(out_shape, data)?),
            op,
            self.requires_grad(),
        ))
    }

    /// Row `i` of a 2-D tensor as a vector.
    pub fn row(self, i: usize) -> Result<Var<'g, T>> {
        let c = self.value().dims2()?[1];
        self.slice_rows(i, i + 1)?.reshape(&[c])
    }

    /// Concatenation along axis 0.
    pub fn concat_rows(parts: &[Var<'g, T>]) -> Result<Var<'g, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let tail = first.shape()[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let v = p.value();
            if v.shape().len() != tail.len() + 1 || v.shape()[1..] != tail[..] {
                return shape_err(format!("concat rows: {:?} vs trailing {tail:?}", v.shape()));
            }
            rows += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let rg = parts.iter().any(|p| p.requires_grad());
        let op = Op::ConcatRows(parts.iter().map(|p| p.id).collect());
        Ok(first.graph.push(Rc::new(Tensor::new(shape, data)?), op, rg))
    }

    /// Multi-head self-attention on a packed `[n x 3c]` q/k/v matrix.
    pub fn attention(self, heads: usize) -> Result<Var<'g, T>> {
        let a = self.value();
        let [n, w] = a.dims2()?;
        if w % 3 != 0 || (w / 3) % heads != 0 {
            return shape_err(format!("attention: width {w} with {heads} heads"));
        }
        let c = w / 3;
        let mut out = vec![T::zero(); n * c];
        let mut probs = vec![T::zero(); heads * n * n];
        kernels::attention_forward(a.data(), n, c, heads, &mut out, &mut probs);
        let op = Op::Attention {
            qkv: self.id,
            heads,
            probs,
        };
        Ok(self
            .graph
            .push(Rc::new(Tensor::new([n, c], out)?), op, self.requires_grad()))
    }
}

/// Output shape and, per input flat index, the output flat index.
fn reduce_index_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let out_shape: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &d)| d)
        .collect();
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..n {
        let mut o = 0;
        for (ax, &i) in idx.iter().enumerate() {
            if !axes.contains(&ax) {
                o = o * shape[ax] + i;
            }
        }
        map.push(o);
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (out_shape, map)
}

/// Gradient buffer of a parent, or `None` if it does not need one.
fn slot<'a, T: Scalar>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    id: NodeId,
) -> Option<&'a mut Vec<T>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let n = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| vec![T::zero(); n]))
}

/// Accumulates `g` into a possibly broadcast operand.
fn acc_broadcast<T: Scalar>(dst: &mut [T], g: &[T], f: impl Fn(usize) -> T) {
    let n = dst.len();
    if n == g.len() {
        for i in 0..n {
            dst[i] += g[i] * f(i);
        }
    } else {
        for i in 0..g.len() {
            dst[i % n] += g[i] * f(i);
        }
    }
}

pub(crate) fn backprop<T: Scalar>(
    nodes: &[Node<T>],
    id: NodeId,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let node = &nodes[id];
    let val = |i: NodeId| nodes[i].value.clone();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) {
                -T::one()
            } else {
                T::one()
            };
            if let Some(ga) = slot(nodes, grads, *a) {
                acc_broadcast(ga, g, |_| T::one());
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                acc_broadcast(gb, g, |_| sign);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (ad, bd) = (av.data(), bv.data());
            if let Some(ga) = slot(nodes, grads, *a) {
                acc_broadcast(ga, g, |i| bd[i % bd.len()]);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                acc_broadcast(gb, g, |i| ad[i % ad.len()]);
            }
        }
        Op::Scale(a, s) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                kernels::axpy(*s, g, ga);
            }
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                kernels::axpy(T::one(), g, ga);
            }
        }
        Op::Sigmoid(a) => {
            let y = node.value.clone();
            if let Some(ga) = slot(nodes, grads, *a) {
                for (i, &yi) in y.data().iter().enumerate() {
                    ga[i] += g[i] * yi * (T::one() - yi);
                }
            }
        }
        Op::Log(a) => {
            let x = val(*a);
            if let Some(ga) = slot(nodes, grads, *a) {
                for (i, &xi) in x.data().iter().enumerate() {
                    ga[i] += g[i] / xi;
                }
            }
        }
        Op::Gelu(a) => {
            let x = val(*a);
            if let Some(ga) = slot(nodes, grads, *a) {
                for (i, &xi) in x.data().iter().enumerate() {
                    ga[i] += g[i] * kernels::gelu_grad(xi);
                }
            }
        }
        Op::Clamp { a, lo, hi } => {
            let x = val(*a);
            if let Some(ga) = slot(nodes, grads, *a) {
                for (i, &xi) in x.data().iter().enumerate() {
                    if xi >= *lo && xi <= *hi {
                        ga[i] += g[i];
                    }
                }
            }
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let [m, k] = av.dims2().unwrap();
            let n = bv.dims2().unwrap()[1];
            if let Some(ga) = slot(nodes, grads, *a) {
                kernels::matmul_bt_acc(g, bv.data(), ga, m, k, n);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                kernels::matmul_at_acc(av.data(), g, gb, m, k, n);
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let gv = val(*gamma);
            let c = gv.numel();
            let rows = xhat.len() / c;
            if let Some(gb) = slot(nodes, grads, *beta) {
                for r in 0..rows {
                    kernels::axpy(T::one(), &g[r * c..(r + 1) * c], gb);
                }
            }
            if let Some(gg) = slot(nodes, grads, *gamma) {
                for i in 0..xhat.len() {
                    gg[i % c] += g[i] * xhat[i];
                }
            }
            if let Some(gx) = slot(nodes, grads, *x) {
                let cf = T::from_usize(c).unwrap();
                let mut dxhat = vec![T::zero(); c];
                for r in 0..rows {
                    let h = &xhat[r * c..(r + 1) * c];
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..c {
                        dxhat[j] = g[r * c + j] * gv.data()[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * h[j];
                    }
                    m1 /= cf;
                    m2 /= cf;
                    for j in 0..c {
                        gx[r * c + j] += rstd[r] * (dxhat[j] - m1 - h[j] * m2);
                    }
                }
            }
        }
        Op::Reduce { a, mean, axes } => {
            let av = val(*a);
            if let Some(ga) = slot(nodes, grads, *a) {
                let (_, map) = reduce_index_map(av.shape(), axes);
                let scale = if *mean {
                    let count: usize = axes.iter().map(|&ax| av.shape()[ax]).product();
                    T::one() / T::from_usize(count).unwrap()
                } else {
                    T::one()
                };
                for (i, &o) in map.iter().enumerate() {
                    ga[i] += g[o] * scale;
                }
            }
        }
        Op::Cosine { a, b, eps } => {
            let (av, bv) = (val(*a), val(*b));
            let (ad, bd) = (av.data(), bv.data());
            let c = node.value.item();
            let ra = kernels::dot(ad, ad).sqrt();
            let rb = kernels::dot(bd, bd).sqrt();
            let (na, nb) = (ra.max(*eps), rb.max(*eps));
            let g0 = g[0];
            // dc/da = b / (na nb) - [|a| > eps] c a / |a|^2
            let grad_side = |dst: &mut Vec<T>, own: &[T], other: &[T], r_own: T| {
                let k = g0 / (na * nb);
                let self_term = if r_own > *eps {
                    g0 * c / (r_own * r_own)
                } else {
                    T::zero()
                };
                for i in 0..dst.len() {
                    dst[i] += k * other[i] - self_term * own[i];
                }
            };
            if let Some(ga) = slot(nodes, grads, *a) {
                grad_side(ga, ad, bd, ra);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                grad_side(gb, bd, ad, rb);
            }
        }
        Op::Dropout { a, mask } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..mask.len() {
                    ga[i] += g[i] * mask[i];
                }
            }
        }
        Op::Transpose(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                let [r, c] = node.value.dims2().unwrap();
                // output is [r x c] = input^T, input is [c x r]
                for i in 0..r {
                    for j in 0..c {
                        ga[j * r + i] += g[i * c + j];
                    }
                }
            }
        }
        Op::SliceRows { a, start } => {
            let inner: usize = node.value.shape()[1..].iter().product();
            if let Some(ga) = slot(nodes, grads, *a) {
                let off = start * inner;
                kernels::axpy(T::one(), g, &mut ga[off..off + g.len()]);
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let n = nodes[p].value.numel();
                if let Some(gp) = slot(nodes, grads, p) {
                    kernels::axpy(T::one(), &g[off..off + n], gp);
                }
                off += n;
            }
        }
        Op::Attention { qkv, heads, probs } => {
            let a = val(*qkv);
            let [n, w] = a.dims2().unwrap();
            if let Some(ga) = slot(nodes, grads, *qkv) {
                kernels::attention_backward(a.data(), probs, g, n, w / 3, *heads, ga);
            }
        }
    }
}
