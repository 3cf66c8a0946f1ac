//! Quasiseparable (bidirectional) mixing.
//!
//! The dense matrix has entries
//!
//! ```text
//! m_ij = c→_iᵀ (A→_i ⋯ A→_{j+1}) b→_j    i > j
//!        δ_i                            i = j
//!        c←_jᵀ (A←_j ⋯ A←_{i+1}) b←_i    i < j
//! ```
//!
//! and is applied without materialization as
//! `shift(SS(x)) + flip(shift(SS(flip(x)))) + δ ⊙ x`, where `SS` is a causal
//! semiseparable scan `h_t = A_t h_{t-1} + b_t x_t`, `y_t = ĉ_tᵀ h_t`. Because
//! the shift delays the readout by one token, the scan reads out through
//! `ĉ_t = A_{t+1}ᵀ c_{t+1}`, which puts exactly `A_i ⋯ A_{j+1}` between `b_j`
//! and `c_i`.

use std::rc::Rc;

use super::seq_dims;
use crate::error::{invalid, Error, Result};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor, Var};

/// One direction's generators: `a (L, N, N)`, `b (L, N)`, `c (L, N)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Triple<T> {
    pub a: Tensor<T>,
    pub b: Tensor<T>,
    pub c: Tensor<T>,
}

impl<T: Real> Triple<T> {
    /// A triple with diagonal transitions given as `(L, N)`.
    pub fn diagonal(diag: &Tensor<T>, b: Tensor<T>, c: Tensor<T>) -> Result<Self> {
        let (l, n) = seq_dims("quasiseparable triple", diag.shape())?;
        let mut a = vec![T::zero(); l * n * n];
        for t in 0..l {
            for k in 0..n {
                a[(t * n + k) * n + k] = diag.data()[t * n + k];
            }
        }
        Ok(Triple {
            a: Tensor::new(&[l, n, n], a)?,
            b,
            c,
        })
    }

    fn dims(&self) -> Result<(usize, usize)> {
        let (l, n) = seq_dims("quasiseparable triple", self.b.shape())?;
        if self.c.shape() != [l, n] {
            return Err(Error::shape("quasiseparable triple", self.c.shape(), &[l, n]));
        }
        if self.a.shape() != [l, n, n] {
            return Err(Error::shape("quasiseparable triple", self.a.shape(), &[l, n, n]));
        }
        Ok((l, n))
    }

    /// `A_t` applied to `v` (or `A_tᵀ` when `transpose`).
    fn apply(&self, t: usize, v: &[T], transpose: bool, out: &mut [T]) {
        let n = v.len();
        let a = &self.a.data()[t * n * n..(t + 1) * n * n];
        for (r, o) in out.iter_mut().enumerate() {
            *o = (0..n)
                .map(|k| if transpose { a[k * n + r] } else { a[r * n + k] } * v[k])
                .sum();
        }
    }
}

/// Parameters of an N-quasiseparable mixing matrix over `L` tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct QuasiParams<T> {
    pub forward: Triple<T>,
    pub backward: Triple<T>,
    /// `(L,)`
    pub delta: Tensor<T>,
}

impl<T: Real> QuasiParams<T> {
    pub fn new(forward: Triple<T>, backward: Triple<T>, delta: Tensor<T>) -> Result<Self> {
        let (l, n) = forward.dims()?;
        if backward.dims()? != (l, n) {
            return Err(Error::shape("quasiseparable params", forward.b.shape(), backward.b.shape()));
        }
        if delta.shape() != [l] {
            return Err(Error::shape("quasiseparable params", delta.shape(), &[l]));
        }
        Ok(QuasiParams {
            forward,
            backward,
            delta,
        })
    }

    /// Seeded random parameters. Diagonal transitions lie in `(0, 1)`; full
    /// ones are scaled to keep products bounded.
    pub fn random(rng: &mut Rng, len: usize, n: usize, diagonal: bool) -> Result<Self> {
        let triple = |rng: &mut Rng| -> Result<Triple<T>> {
            let b = Tensor::from_f64(&[len, n], &rng.uniform_vec(len * n, -1.0, 1.0))?;
            let c = Tensor::from_f64(&[len, n], &rng.uniform_vec(len * n, -1.0, 1.0))?;
            if diagonal {
                let d = Tensor::from_f64(&[len, n], &rng.uniform_vec(len * n, 0.05, 0.98))?;
                Triple::diagonal(&d, b, c)
            } else {
                let bound = 0.9 / n as f64;
                let a = Tensor::from_f64(&[len, n, n], &rng.uniform_vec(len * n * n, -bound, bound))?;
                Ok(Triple { a, b, c })
            }
        };
        let forward = triple(rng)?;
        let backward = triple(rng)?;
        let delta = Tensor::from_f64(&[len], &rng.uniform_vec(len, -1.0, 1.0))?;
        Self::new(forward, backward, delta)
    }

    pub fn len(&self) -> usize {
        self.delta.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn state_dim(&self) -> usize {
        self.forward.b.shape()[1]
    }
}

/// Dense `L×L` mixing matrix, evaluated entry by entry.
pub fn quasiseparable_materialize<T: Real>(q: &QuasiParams<T>) -> Result<Tensor<T>> {
    let (l, n) = (q.len(), q.state_dim());
    let mut m = vec![T::zero(); l * l];
    let mut v = vec![T::zero(); n];
    let mut tmp = vec![T::zero(); n];
    let dot = |a: &[T], b: &[T]| a.iter().zip(b).map(|(&x, &y)| x * y).sum::<T>();
    let (f, bw) = (&q.forward, &q.backward);
    for j in 0..l {
        // Below the diagonal, column j: v = A_i ⋯ A_{j+1} b_j.
        v.copy_from_slice(&f.b.data()[j * n..(j + 1) * n]);
        for i in j + 1..l {
            f.apply(i, &v, false, &mut tmp);
            std::mem::swap(&mut v, &mut tmp);
            m[i * l + j] = dot(&f.c.data()[i * n..(i + 1) * n], &v);
        }
    }
    for i in 0..l {
        // Above the diagonal, row i: v = A←_j ⋯ A←_{i+1} b←_i.
        v.copy_from_slice(&bw.b.data()[i * n..(i + 1) * n]);
        for j in i + 1..l {
            bw.apply(j, &v, false, &mut tmp);
            std::mem::swap(&mut v, &mut tmp);
            m[i * l + j] = dot(&bw.c.data()[j * n..(j + 1) * n], &v);
        }
        m[i * l + i] = q.delta.data()[i];
    }
    Tensor::new(&[l, l], m)
}

fn flip_rows<T: Real>(l: usize, w: usize, x: &[T]) -> Vec<T> {
    (0..l).rev().flat_map(|t| x[t * w..(t + 1) * w].iter().copied()).collect()
}

fn shift_rows<T: Real>(l: usize, w: usize, x: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); l * w];
    out[w..].copy_from_slice(&x[..(l - 1) * w]);
    out
}

/// Causal scan with state `(N, d)`: `h_t = A_t h_{t-1} + b_t x_tᵀ`,
/// `y_t = ĉ_tᵀ h_t`, where `ĉ_t = A_{t+1}ᵀ c_{t+1}` and `ĉ_{L-1} = 0`.
fn ss_scan_full<T: Real>(x: &[T], d: usize, tr: &Triple<T>) -> Vec<T> {
    let (l, n) = (tr.b.shape()[0], tr.b.shape()[1]);
    let (b, c) = (tr.b.data(), tr.c.data());
    let mut h = vec![T::zero(); n * d];
    let mut next = vec![T::zero(); n * d];
    let mut chat = vec![T::zero(); n];
    let mut y = vec![T::zero(); l * d];
    for t in 0..l {
        let a = &tr.a.data()[t * n * n..(t + 1) * n * n];
        for r in 0..n {
            for ch in 0..d {
                let carried: T = (0..n).map(|k| a[r * n + k] * h[k * d + ch]).sum();
                next[r * d + ch] = carried + b[t * n + r] * x[t * d + ch];
            }
        }
        std::mem::swap(&mut h, &mut next);
        if t + 1 < l {
            tr.apply(t + 1, &c[(t + 1) * n..(t + 2) * n], true, &mut chat);
            for ch in 0..d {
                y[t * d + ch] = (0..n).map(|k| chat[k] * h[k * d + ch]).sum();
            }
        }
    }
    y
}

/// Applies the quasiseparable matrix of `q` to `x (L, d)` through the
/// shift/flip/scan decomposition, in `O(L·N²·d)`.
pub fn quasiseparable_matmul<T: Real>(x: &Tensor<T>, q: &QuasiParams<T>) -> Result<Tensor<T>> {
    let (l, d) = seq_dims("quasiseparable_matmul", x.shape())?;
    if l != q.len() {
        return Err(invalid!("quasiseparable_matmul: sequence has {l} tokens, parameters {}", q.len()));
    }
    let n = q.state_dim();
    let xd = x.data();
    let fwd = shift_rows(l, d, &ss_scan_full(xd, d, &q.forward));

    // The flipped sequence runs the backward triple with the roles of b and
    // c exchanged and transposed transitions: A'_r = A←_{L-r}ᵀ.
    let bw = &q.backward;
    let mut a_rev = vec![T::zero(); l * n * n];
    for r in 1..l {
        let src = &bw.a.data()[(l - r) * n * n..(l - r + 1) * n * n];
        for i in 0..n {
            for k in 0..n {
                a_rev[(r * n + i) * n + k] = src[k * n + i];
            }
        }
    }
    let rev = Triple {
        a: Tensor::new(&[l, n, n], a_rev)?,
        b: Tensor::new(&[l, n], flip_rows(l, n, bw.c.data()))?,
        c: Tensor::new(&[l, n], flip_rows(l, n, bw.b.data()))?,
    };
    let bwd = flip_rows(l, d, &shift_rows(l, d, &ss_scan_full(&flip_rows(l, d, xd), d, &rev)));

    let delta = q.delta.data();
    let y = (0..l * d)
        .map(|i| fwd[i] + bwd[i] + delta[i / d] * xd[i])
        .collect();
    Tensor::new(&[l, d], y)
}

impl<'g, T: Real> Var<'g, T> {
    /// Causal scan shared across the `d` channels of `self (L, d)` with
    /// diagonal transitions `a (L, N)`, input vectors `b (L, N)` and readout
    /// vectors `c (L, N)`: `h_t = a_t ⊙ h_{t-1} + b_t x_t`, `y_t = c_tᵀ h_t`.
    pub fn ss_scan(self, a: Var<'g, T>, b: Var<'g, T>, c: Var<'g, T>) -> Result<Var<'g, T>> {
        let (xv, av, bv, cv) = (self.value(), a.value(), b.value(), c.value());
        let (l, d) = seq_dims("ss_scan", xv.shape())?;
        let n = *av.shape().last().unwrap_or(&0);
        for t in [&av, &bv, &cv] {
            if t.shape() != [l, n] {
                return Err(Error::shape("ss_scan", xv.shape(), t.shape()));
            }
        }
        let mut states = vec![T::zero(); l * n * d];
        let mut y = vec![T::zero(); l * d];
        {
            let (x, a, b, c) = (xv.data(), av.data(), bv.data(), cv.data());
            let mut h = vec![T::zero(); n * d];
            for t in 0..l {
                let xt = &x[t * d..(t + 1) * d];
                let yt = &mut y[t * d..(t + 1) * d];
                for k in 0..n {
                    let (ak, bk, ck) = (a[t * n + k], b[t * n + k], c[t * n + k]);
                    let hk = &mut h[k * d..(k + 1) * d];
                    for ch in 0..d {
                        hk[ch] = ak * hk[ch] + bk * xt[ch];
                        yt[ch] += ck * hk[ch];
                    }
                }
                states[t * n * d..(t + 1) * n * d].copy_from_slice(&h);
            }
        }
        let states = Rc::new(states);
        let value = Tensor::new(&[l, d], y)?;
        let backward = Box::new(move |g: &[T], _: &[bool]| {
            let (x, a, b, c) = (xv.data(), av.data(), bv.data(), cv.data());
            let mut gx = vec![T::zero(); l * d];
            let mut ga = vec![T::zero(); l * n];
            let mut gb = vec![T::zero(); l * n];
            let mut gc = vec![T::zero(); l * n];
            let mut gh = vec![T::zero(); n * d];
            for t in (0..l).rev() {
                let gy = &g[t * d..(t + 1) * d];
                let xt = &x[t * d..(t + 1) * d];
                for k in 0..n {
                    let i = t * n + k;
                    let h = &states[(t * n + k) * d..(t * n + k + 1) * d];
                    let ghk = &mut gh[k * d..(k + 1) * d];
                    let (mut sc, mut sa, mut sb) = (T::zero(), T::zero(), T::zero());
                    for ch in 0..d {
                        sc += gy[ch] * h[ch];
                        ghk[ch] += gy[ch] * c[i];
                        if t > 0 {
                            sa += ghk[ch] * states[((t - 1) * n + k) * d + ch];
                        }
                        sb += ghk[ch] * xt[ch];
                        gx[t * d + ch] += ghk[ch] * b[i];
                        ghk[ch] *= a[i];
                    }
                    gc[i] = sc;
                    ga[i] = sa;
                    gb[i] = sb;
                }
            }
            vec![Some(gx), Some(ga), Some(gb), Some(gc)]
        });
        self.graph().push("ss_scan", value, &[self, a, b, c], backward)
    }
}

/// Moves every row one position earlier along axis 0; the last row is zero.
fn shift_earlier<'g, T: Real>(v: Var<'g, T>) -> Result<Var<'g, T>> {
    v.flip(0)?.shift(0)?.flip(0)
}

/// Differentiable quasiseparable mixing of `x (L, d)` with diagonal
/// transitions. Each direction is `(a, b, c)` of shape `(L, N)`; `delta`
/// is `(L, 1)`. Composed literally from scans, shifts and flips.
pub fn quasiseparable_mix<'g, T: Real>(
    x: Var<'g, T>,
    forward: [Var<'g, T>; 3],
    backward: [Var<'g, T>; 3],
    delta: Var<'g, T>,
) -> Result<Var<'g, T>> {
    let [af, bf, cf] = forward;
    let chat = shift_earlier(af.mul(cf)?)?;
    let fwd = x.ss_scan(af, bf, chat)?.shift(0)?;

    let [ab, bb, cb] = backward;
    let a_rev = ab.flip(0)?.shift(0)?;
    let c_rev = bb.flip(0)?;
    let b_rev = cb.flip(0)?;
    let chat_rev = shift_earlier(a_rev.mul(c_rev)?)?;
    let bwd = x.flip(0)?.ss_scan(a_rev, b_rev, chat_rev)?.shift(0)?.flip(0)?;

    fwd.add(bwd)?.add(x.mul(delta)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqmix::dense_apply;
    use crate::tensor::{grad_check, Graph};

    fn random_x(rng: &mut Rng, l: usize, d: usize) -> Tensor<f64> {
        Tensor::new(&[l, d], rng.uniform_vec(l * d, -1.0, 1.0)).unwrap()
    }

    fn oracle(q: &QuasiParams<f64>, x: &Tensor<f64>) -> Vec<f64> {
        let m = quasiseparable_materialize(q).unwrap();
        dense_apply(q.len(), x.shape()[1], m.data(), x.data())
    }

    #[test]
    fn zero_generators_leave_the_diagonal() {
        let mut rng = Rng::new(4);
        let mut q = QuasiParams::<f64>::random(&mut rng, 6, 2, true).unwrap();
        for tr in [&mut q.forward, &mut q.backward] {
            tr.b = Tensor::zeros(&[6, 2]);
            tr.c = Tensor::zeros(&[6, 2]);
        }
        let x = random_x(&mut rng, 6, 3);
        let y = quasiseparable_matmul(&x, &q).unwrap();
        for t in 0..6 {
            for ch in 0..3 {
                assert_eq!(y.at(&[t, ch]), q.delta.data()[t] * x.at(&[t, ch]));
            }
        }
        q.delta = Tensor::full(&[6], 1.0);
        let m = quasiseparable_materialize(&q).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(m.at(&[i, j]), if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn decomposition_matches_dense() {
        let mut rng = Rng::new(2);
        let q = QuasiParams::<f64>::random(&mut rng, 8, 2, true).unwrap();
        let x = random_x(&mut rng, 8, 1);
        let y = quasiseparable_matmul(&x, &q).unwrap();
        let want = oracle(&q, &x);
        for (a, b) in y.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-10);
        }
        let full = QuasiParams::<f64>::random(&mut rng, 11, 3, false).unwrap();
        let x = random_x(&mut rng, 11, 2);
        let y = quasiseparable_matmul(&x, &full).unwrap();
        for (a, b) in y.data().iter().zip(&oracle(&full, &x)) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn swapped_triples_give_symmetric_matrix() {
        let mut rng = Rng::new(6);
        let mut q = QuasiParams::<f64>::random(&mut rng, 7, 3, true).unwrap();
        q.backward = q.forward.clone();
        let m = quasiseparable_materialize(&q).unwrap();
        for i in 0..7 {
            for j in 0..7 {
                assert!((m.at(&[i, j]) - m.at(&[j, i])).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_input_and_length_mismatch() {
        let mut rng = Rng::new(9);
        let q = QuasiParams::<f64>::random(&mut rng, 5, 2, true).unwrap();
        let y = quasiseparable_matmul(&Tensor::zeros(&[5, 2]), &q).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert!(quasiseparable_matmul(&Tensor::zeros(&[4, 2]), &q).is_err());
    }

    #[test]
    fn single_token() {
        let mut rng = Rng::new(10);
        let q = QuasiParams::<f64>::random(&mut rng, 1, 2, true).unwrap();
        let x = random_x(&mut rng, 1, 2);
        let y = quasiseparable_matmul(&x, &q).unwrap();
        assert_eq!(y.data()[1], q.delta.data()[0] * x.data()[1]);
    }

    fn diag_of(tr: &Triple<f64>) -> Tensor<f64> {
        let (l, n) = (tr.b.shape()[0], tr.b.shape()[1]);
        let data = (0..l * n).map(|i| tr.a.data()[(i * n) + i % n]).collect();
        Tensor::new(&[l, n], data).unwrap()
    }

    #[test]
    fn differentiable_mix_matches_plain() {
        let mut rng = Rng::new(12);
        let (l, n, d) = (9, 3, 2);
        let q = QuasiParams::<f64>::random(&mut rng, l, n, true).unwrap();
        let x = random_x(&mut rng, l, d);
        let want = quasiseparable_matmul(&x, &q).unwrap();
        let g = Graph::new();
        let c = |t: &Tensor<f64>| g.constant(t.clone());
        let y = quasiseparable_mix(
            c(&x),
            [c(&diag_of(&q.forward)), c(&q.forward.b), c(&q.forward.c)],
            [c(&diag_of(&q.backward)), c(&q.backward.b), c(&q.backward.c)],
            c(&q.delta.clone().reshaped(&[l, 1]).unwrap()),
        )
        .unwrap()
        .value();
        assert!(y.max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn ss_scan_gradients() {
        let mut rng = Rng::new(13);
        let (l, n, d) = (6, 2, 3);
        let inputs = [
            random_x(&mut rng, l, d),
            Tensor::new(&[l, n], rng.uniform_vec(l * n, 0.1, 0.9)).unwrap(),
            random_x(&mut rng, l, n),
            random_x(&mut rng, l, n),
        ];
        let w = random_x(&mut rng, l, d);
        for which in 0..4 {
            let report = grad_check(
                |g, v| {
                    let mut vars: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
                    vars[which] = v;
                    vars[0].ss_scan(vars[1], vars[2], vars[3])?.mul(g.constant(w.clone()))?.sum()
                },
                &inputs[which],
                1e-6,
            )
            .unwrap();
            assert!(report.max_rel_err < 1e-7, "input {which}: {report:?}");
        }
    }
}
