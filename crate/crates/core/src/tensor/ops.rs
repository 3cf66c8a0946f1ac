//! Elementwise, reduction, shape and matrix ops with their backward rules.

use std::rc::Rc;

use super::gemm::{matmul_into, matmul_t, Operand};
use super::{axis_split, numel, strides, Real, Tensor, Var};
use crate::error::{invalid, Error, Result};

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` right-aligned into `out_shape`, zero on broadcast axes.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let own = strides(shape);
    (0..rank)
        .map(|i| {
            if i + shape.len() < rank {
                0
            } else {
                let j = i + shape.len() - rank;
                if shape[j] == 1 {
                    0
                } else {
                    own[j]
                }
            }
        })
        .collect()
}

/// Visits every output offset with the matching offsets into both operands.
fn for_each_pair(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out_shape.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let n = numel(out_shape);
    let last = out_shape[rank - 1];
    if n == 0 || last == 0 {
        return;
    }
    let (la, lb) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank - 1];
    let (mut oa, mut ob, mut o) = (0usize, 0usize, 0usize);
    while o < n {
        for j in 0..last {
            f(o + j, oa + j * la, ob + j * lb);
        }
        o += last;
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            oa -= sa[d] * out_shape[d];
            ob -= sb[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(invalid!("{op}: axis {axis} out of range for shape {shape:?}"));
    }
    Ok(())
}

fn same_graph<T: Real>(a: &Var<'_, T>, b: &Var<'_, T>) -> Result<()> {
    if !std::ptr::eq(a.graph(), b.graph()) {
        return Err(invalid!("operands belong to different graphs"));
    }
    Ok(())
}

impl<'g, T: Real> Var<'g, T> {
    fn binary(
        self,
        other: Var<'g, T>,
        op: &'static str,
        f: fn(T, T) -> T,
        dfa: fn(T, T) -> T,
        dfb: fn(T, T) -> T,
    ) -> Result<Var<'g, T>> {
        same_graph(&self, &other)?;
        let (a, b) = (self.value(), other.value());
        let out_shape = broadcast_shape(a.shape(), b.shape())
            .ok_or_else(|| Error::shape(op, a.shape(), b.shape()))?;
        let mut out = vec![T::zero(); numel(&out_shape)];
        if a.shape() == b.shape() {
            for ((o, &x), &y) in out.iter_mut().zip(a.data()).zip(b.data()) {
                *o = f(x, y);
            }
        } else {
            let sa = broadcast_strides(a.shape(), &out_shape);
            let sb = broadcast_strides(b.shape(), &out_shape);
            let (ad, bd) = (a.data(), b.data());
            for_each_pair(&out_shape, &sa, &sb, |o, i, j| out[o] = f(ad[i], bd[j]));
        }
        let value = Tensor::new(&out_shape, out)?;
        let backward = Box::new(move |g: &[T], needs: &[bool]| {
            let (ad, bd) = (a.data(), b.data());
            let mut ga = needs[0].then(|| vec![T::zero(); ad.len()]);
            let mut gb = needs[1].then(|| vec![T::zero(); bd.len()]);
            if a.shape() == b.shape() {
                for i in 0..g.len() {
                    if let Some(ga) = ga.as_mut() {
                        ga[i] = g[i] * dfa(ad[i], bd[i]);
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[i] = g[i] * dfb(ad[i], bd[i]);
                    }
                }
            } else {
                let sa = broadcast_strides(a.shape(), &out_shape);
                let sb = broadcast_strides(b.shape(), &out_shape);
                for_each_pair(&out_shape, &sa, &sb, |o, i, j| {
                    if let Some(ga) = ga.as_mut() {
                        ga[i] += g[o] * dfa(ad[i], bd[j]);
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[j] += g[o] * dfb(ad[i], bd[j]);
                    }
                });
            }
            vec![ga, gb]
        });
        self.graph().push(op, value, &[self, other], backward)
    }

    /// Broadcasting addition.
    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "add", |x, y| x + y, |_, _| T::one(), |_, _| T::one())
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "sub", |x, y| x - y, |_, _| T::one(), |_, _| -T::one())
    }

    /// Broadcasting elementwise product.
    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "mul", |x, y| x * y, |_, y| y, |x, _| x)
    }

    /// Broadcasting elementwise quotient.
    pub fn div(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "div", |x, y| x / y, |_, y| T::one() / y, |x, y| -x / (y * y))
    }

    /// Elementwise map `y = f(x)` with derivative `df(x, y)`.
    pub(crate) fn unary(
        self,
        op: &'static str,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Result<Var<'g, T>> {
        let x = self.value();
        let value = Tensor::new(x.shape(), x.data().iter().map(|&v| f(v)).collect())?;
        let y = Rc::new(value.clone());
        let backward = Box::new(move |g: &[T], _: &[bool]| {
            let grad = g
                .iter()
                .zip(x.data())
                .zip(y.data())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(grad)]
        });
        self.graph().push(op, value, &[self], backward)
    }

    pub fn neg(self) -> Result<Var<'g, T>> {
        self.unary("neg", |x| -x, |_, _| -T::one())
    }

    pub fn scale(self, c: T) -> Result<Var<'g, T>> {
        self.unary("scale", move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(self, c: T) -> Result<Var<'g, T>> {
        self.unary("add_scalar", move |x| x + c, |_, _| T::one())
    }

    pub fn sigmoid(self) -> Result<Var<'g, T>> {
        self.unary("sigmoid", sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn silu(self) -> Result<Var<'g, T>> {
        self.unary(
            "silu",
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s + x * s * (T::one() - s)
            },
        )
    }

    pub fn relu(self) -> Result<Var<'g, T>> {
        self.unary(
            "relu",
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn exp(self) -> Result<Var<'g, T>> {
        self.unary("exp", |x| x.exp(), |_, y| y)
    }

    /// Natural logarithm.
    pub fn ln(self) -> Result<Var<'g, T>> {
        self.unary("ln", |x| x.ln(), |x, _| T::one() / x)
    }

    pub fn softplus(self) -> Result<Var<'g, T>> {
        self.unary("softplus", softplus, |x, _| sigmoid(x))
    }

    pub fn square(self) -> Result<Var<'g, T>> {
        self.unary("square", |x| x * x, |x, _| x + x)
    }

    /// Sum of all elements, shape `[]`.
    pub fn sum(self) -> Result<Var<'g, T>> {
        let x = self.value();
        let n = x.numel();
        let value = Tensor::scalar(x.sum());
        let backward = Box::new(move |g: &[T], _: &[bool]| vec![Some(vec![g[0]; n])]);
        self.graph().push("sum", value, &[self], backward)
    }

    pub fn mean(self) -> Result<Var<'g, T>> {
        let n = self.value().numel().max(1);
        self.sum()?.scale(T::one() / T::lit(n as f64))
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        check_axis("sum_axis", x.shape(), axis)?;
        let (outer, n, inner) = axis_split(x.shape(), axis);
        let mut out = vec![T::zero(); outer * inner];
        let xd = x.data();
        for o in 0..outer {
            for i in 0..n {
                let src = &xd[(o * n + i) * inner..(o * n + i + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = 1;
        let value = Tensor::new(&shape, out)?;
        let backward = Box::new(move |g: &[T], _: &[bool]| {
            let mut gx = vec![T::zero(); outer * n * inner];
            for o in 0..outer {
                for i in 0..n {
                    gx[(o * n + i) * inner..(o * n + i + 1) * inner]
                        .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(gx)]
        });
        self.graph().push("sum_axis", value, &[self], backward)
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'g, T>> {
        let n = self.shape().get(axis).copied().unwrap_or(1).max(1);
        self.sum_axis(axis)?.scale(T::one() / T::lit(n as f64))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, T>> {
        let x = self.value();
        if numel(shape) != x.numel() {
            return Err(Error::shape("reshape", x.shape(), shape));
        }
        let value = Tensor::new(shape, x.data().to_vec())?;
        let backward = Box::new(|g: &[T], _: &[bool]| vec![Some(g.to_vec())]);
        self.graph().push("reshape", value, &[self], backward)
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'g, T>> {
        let x = self.value();
        let rank = x.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(invalid!("permute: {perm:?} is not a permutation of rank {rank}"));
        }
        let value = Tensor::new(
            &perm.iter().map(|&p| x.shape()[p]).collect::<Vec<_>>(),
            permute_data(x.data(), x.shape(), perm),
        )?;
        let mut inverse = vec![0; rank];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let out_shape = value.shape().to_vec();
        let backward = Box::new(move |g: &[T], _: &[bool]| {
            vec![Some(permute_data(g, &out_shape, &inverse))]
        });
        self.graph().push("permute", value, &[self], backward)
    }

    /// Reverses the order of elements along `axis`.
    pub fn flip(self, axis: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        check_axis("flip", x.shape(), axis)?;
        let split = axis_split(x.shape(), axis);
        let value = Tensor::new(x.shape(), flip_data(x.data(), split))?;
        let backward = Box::new(move |g: &[T], _: &[bool]| vec![Some(flip_data(g, split))]);
        self.graph().push("flip", value, &[self], backward)
    }

    /// Moves every element one position later along `axis`; position 0
    /// becomes zero and the last element is dropped.
    pub fn shift(self, axis: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        check_axis("shift", x.shape(), axis)?;
        let split = axis_split(x.shape(), axis);
        let value = Tensor::new(x.shape(), shift_data(x.data(), split, true))?;
        let backward =
            Box::new(move |g: &[T], _: &[bool]| vec![Some(shift_data(g, split, false))]);
        self.graph().push("shift", value, &[self], backward)
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        check_axis("slice", x.shape(), axis)?;
        let (outer, n, inner) = axis_split(x.shape(), axis);
        if start > end || end > n {
            return Err(invalid!("slice: range {start}..{end} out of bounds for extent {n}"));
        }
        let m = end - start;
        let mut out = Vec::with_capacity(outer * m * inner);
        for o in 0..outer {
            out.extend_from_slice(&x.data()[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = m;
        let value = Tensor::new(&shape, out)?;
        let backward = Box::new(move |g: &[T], _: &[bool]| {
            let mut gx = vec![T::zero(); outer * n * inner];
            for o in 0..outer {
                gx[(o * n + start) * inner..(o * n + end) * inner]
                    .copy_from_slice(&g[o * m * inner..(o + 1) * m * inner]);
            }
            vec![Some(gx)]
        });
        self.graph().push("slice", value, &[self], backward)
    }

    /// Zero padding along `axis`.
    pub fn pad_axis(self, axis: usize, before: usize, after: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        check_axis("pad_axis", x.shape(), axis)?;
        let (outer, n, inner) = axis_split(x.shape(), axis);
        let m = n + before + after;
        let mut out = vec![T::zero(); outer * m * inner];
        for o in 0..outer {
            out[(o * m + before) * inner..(o * m + before + n) * inner]
                .copy_from_slice(&x.data()[o * n * inner..(o + 1) * n * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = m;
        let value = Tensor::new(&shape, out)?;
        let backward = Box::new(move |g: &[T], _: &[bool]| {
            let mut gx = Vec::with_capacity(outer * n * inner);
            for o in 0..outer {
                gx.extend_from_slice(&g[(o * m + before) * inner..(o * m + before + n) * inner]);
            }
            vec![Some(gx)]
        });
        self.graph().push("pad_axis", value, &[self], backward)
    }

    /// Cyclic roll by `shift` positions toward higher indices along `axis`.
    pub fn roll(self, axis: usize, shift: isize) -> Result<Var<'g, T>> {
        let n = *self
            .shape()
            .get(axis)
            .ok_or_else(|| invalid!("roll: axis {axis} out of range"))?;
        if n == 0 {
            return Ok(self);
        }
        let s = shift.rem_euclid(n as isize) as usize;
        if s == 0 {
            return Ok(self);
        }
        let tail = self.slice(axis, n - s, n)?;
        let head = self.slice(axis, 0, n - s)?;
        Var::concat(&[tail, head], axis)
    }

    /// Joins vars along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'g, T>], axis: usize) -> Result<Var<'g, T>> {
        let first = parts.first().ok_or_else(|| invalid!("concat of zero tensors"))?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        check_axis("concat", &base, axis)?;
        for (p, v) in parts.iter().zip(&values) {
            same_graph(first, p)?;
            let s = v.shape();
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape("concat", &base, s));
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let extents: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = extents.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &n) in values.iter().zip(&extents) {
                out.extend_from_slice(&v.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let value = Tensor::new(&shape, out)?;
        let backward = Box::new(move |g: &[T], needs: &[bool]| {
            let mut grads: Vec<Option<Vec<T>>> = extents
                .iter()
                .zip(needs)
                .map(|(&n, &need)| need.then(|| Vec::with_capacity(outer * n * inner)))
                .collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gv, &n) in grads.iter_mut().zip(&extents) {
                    if let Some(gv) = gv.as_mut() {
                        gv.extend_from_slice(&g[off..off + n * inner]);
                    }
                    off += n * inner;
                }
            }
            grads
        });
        first.graph().push("concat", value, parts, backward)
    }

    /// Matrix product: `(m,k)·(k,n)` or batched `(b,m,k)·(b,k,n)`.
    pub fn matmul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        same_graph(&self, &other)?;
        let (a, b) = (self.value(), other.value());
        let (batch, m, k, n) = match (a.shape(), b.shape()) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n),
            ([ba, m, k], [bb, k2, n]) if ba == bb && k == k2 => (*ba, *m, *k, *n),
            _ => return Err(Error::shape("matmul", a.shape(), b.shape())),
        };
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            matmul_into(
                m,
                k,
                n,
                &a.data()[bi * m * k..(bi + 1) * m * k],
                &b.data()[bi * k * n..(bi + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let shape = if a.rank() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let value = Tensor::new(&shape, out)?;
        let backward = Box::new(move |g: &[T], needs: &[bool]| {
            let mut ga = needs[0].then(|| vec![T::zero(); batch * m * k]);
            let mut gb = needs[1].then(|| vec![T::zero(); batch * k * n]);
            for bi in 0..batch {
                let gs = &g[bi * m * n..(bi + 1) * m * n];
                if let Some(ga) = ga.as_mut() {
                    let bs = Operand::Trans(&b.data()[bi * k * n..(bi + 1) * k * n]);
                    matmul_t(m, n, k, Operand::Plain(gs), bs, &mut ga[bi * m * k..(bi + 1) * m * k]);
                }
                if let Some(gb) = gb.as_mut() {
                    let at = Operand::Trans(&a.data()[bi * m * k..(bi + 1) * m * k]);
                    matmul_t(k, m, n, at, Operand::Plain(gs), &mut gb[bi * k * n..(bi + 1) * k * n]);
                }
            }
            vec![ga, gb]
        });
        self.graph().push("matmul", value, &[self, other], backward)
    }

    /// Dense layer over the last axis: `x·w + b` with `w` of shape `(in, out)`.
    pub fn linear(self, weight: Var<'g, T>, bias: Option<Var<'g, T>>) -> Result<Var<'g, T>> {
        let shape = self.shape();
        let wshape = weight.shape();
        let fan_in = *shape.last().ok_or_else(|| invalid!("linear on a scalar"))?;
        if wshape.len() != 2 || wshape[0] != fan_in {
            return Err(Error::shape("linear", &shape, &wshape));
        }
        let rows = numel(&shape) / fan_in.max(1);
        let y = self.reshape(&[rows, fan_in])?.matmul(weight)?;
        let y = match bias {
            Some(b) => y.add(b)?,
            None => y,
        };
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = wshape[1];
        y.reshape(&out_shape)
    }

    /// Softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        check_axis("softmax", x.shape(), axis)?;
        let split = axis_split(x.shape(), axis);
        let value = Tensor::new(x.shape(), softmax_data(x.data(), split, false))?;
        let y = Rc::new(value.clone());
        let backward = Box::new(move |g: &[T], _: &[bool]| {
            let (outer, n, inner) = split;
            let yd = y.data();
            let mut gx = vec![T::zero(); yd.len()];
            for o in 0..outer {
                for r in 0..inner {
                    let at = |i: usize| (o * n + i) * inner + r;
                    let dot: T = (0..n).map(|i| g[at(i)] * yd[at(i)]).sum();
                    for i in 0..n {
                        gx[at(i)] = yd[at(i)] * (g[at(i)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        });
        self.graph().push("softmax", value, &[self], backward)
    }

    /// Log-softmax along `axis`.
    pub fn log_softmax(self, axis: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        check_axis("log_softmax", x.shape(), axis)?;
        let split = axis_split(x.shape(), axis);
        let value = Tensor::new(x.shape(), softmax_data(x.data(), split, true))?;
        let y = Rc::new(value.clone());
        let backward = Box::new(move |g: &[T], _: &[bool]| {
            let (outer, n, inner) = split;
            let yd = y.data();
            let mut gx = vec![T::zero(); yd.len()];
            for o in 0..outer {
                for r in 0..inner {
                    let at = |i: usize| (o * n + i) * inner + r;
                    let total: T = (0..n).map(|i| g[at(i)]).sum();
                    for i in 0..n {
                        gx[at(i)] = g[at(i)] - yd[at(i)].exp() * total;
                    }
                }
            }
            vec![Some(gx)]
        });
        self.graph().push("log_softmax", value, &[self], backward)
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<T: Real>(x: T) -> T {
    if x > T::lit(30.0) {
        x
    } else {
        x.max(T::zero()) + (-x.abs()).exp().ln_1p()
    }
}

pub(crate) fn permute_data<T: Real>(src: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let gather: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = vec![T::zero(); src.len()];
    let zero = vec![0; out_shape.len()];
    for_each_pair(&out_shape, &gather, &zero, |o, i, _| out[o] = src[i]);
    out
}

fn flip_data<T: Real>(src: &[T], (outer, n, inner): (usize, usize, usize)) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for o in 0..outer {
        for i in (0..n).rev() {
            out.extend_from_slice(&src[(o * n + i) * inner..(o * n + i + 1) * inner]);
        }
    }
    out
}

/// `later == true`: out[i] = src[i-1], out[0] = 0. Otherwise the adjoint:
/// out[i] = src[i+1], out[n-1] = 0.
fn shift_data<T: Real>(src: &[T], (outer, n, inner): (usize, usize, usize), later: bool) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    if n == 0 {
        return out;
    }
    for o in 0..outer {
        let base = o * n * inner;
        if later {
            out[base + inner..base + n * inner]
                .copy_from_slice(&src[base..base + (n - 1) * inner]);
        } else {
            out[base..base + (n - 1) * inner]
                .copy_from_slice(&src[base + inner..base + n * inner]);
        }
    }
    out
}

fn softmax_data<T: Real>(src: &[T], (outer, n, inner): (usize, usize, usize), log: bool) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for r in 0..inner {
            let at = |i: usize| (o * n + i) * inner + r;
            let max = (0..n).map(|i| src[at(i)]).fold(T::neg_infinity(), T::max);
            let total: T = (0..n).map(|i| (src[at(i)] - max).exp()).sum();
            let log_total = total.ln();
            for i in 0..n {
                let z = src[at(i)] - max;
                out[at(i)] = if log { z - log_total } else { z.exp() / total };
            }
        }
    }
    out
}
