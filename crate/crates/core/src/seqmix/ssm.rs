//! Diagonal selective state space scan.
//!
//! Per channel `ch` and state `n`:
//! `h[t] = Ā[t] h[t-1] + (Δ[t] B[t]) x[t]`, `y[t] = C[t]ᵀ h[t] + D x[t]`,
//! with `Ā[t] = exp(-softplus(a) Δ[t])`.

use std::rc::Rc;

use super::seq_dims;
use crate::error::{invalid, Error, Result};
use crate::rng::Rng;
use crate::tensor::{sigmoid, softplus, Real, Tensor, Var};

/// Per-token parameters of one selective scan over a length-`L` sequence
/// with `d` channels and state size `N`.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams<T> {
    /// `(L, d)`, positive step sizes.
    pub delta: Tensor<T>,
    /// `(L, d, N)`, the discretized decays `Ā`.
    pub decay: Tensor<T>,
    /// `(L, N)`
    pub b: Tensor<T>,
    /// `(L, N)`
    pub c: Tensor<T>,
    /// `(d,)`
    pub d_skip: Tensor<T>,
}

#[inline(always)]
fn decay_of<T: Real>(rate: T, delta: T) -> T {
    (-(rate * delta)).exp()
}

impl<T: Real> SsmParams<T> {
    /// Builds the decays from a log-decay parameter `a` of shape `(d, N)`.
    pub fn selective(
        a: &Tensor<T>,
        delta: Tensor<T>,
        b: Tensor<T>,
        c: Tensor<T>,
        d_skip: Tensor<T>,
    ) -> Result<Self> {
        let (l, d) = seq_dims("ssm params", delta.shape())?;
        let n = *a.shape().last().unwrap_or(&0);
        if a.shape() != [d, n] {
            return Err(Error::shape("ssm params", a.shape(), &[d, n]));
        }
        let rate: Vec<T> = a.data().iter().map(|&v| softplus(v)).collect();
        let mut decay = Vec::with_capacity(l * d * n);
        for t in 0..l {
            for ch in 0..d {
                let dt = delta.data()[t * d + ch];
                decay.extend((0..n).map(|k| decay_of(rate[ch * n + k], dt)));
            }
        }
        let p = SsmParams {
            decay: Tensor::new(&[l, d, n], decay)?,
            delta,
            b,
            c,
            d_skip,
        };
        p.check()?;
        Ok(p)
    }

    /// Seeded random parameters with `Δ ∈ [0.05, 1]`.
    pub fn random(rng: &mut Rng, len: usize, d: usize, n: usize) -> Result<Self> {
        let a = Tensor::from_f64(&[d, n], &rng.uniform_vec(d * n, -1.0, 1.5))?;
        let delta = Tensor::from_f64(&[len, d], &rng.uniform_vec(len * d, 0.05, 1.0))?;
        let b = Tensor::from_f64(&[len, n], &rng.uniform_vec(len * n, -1.0, 1.0))?;
        let c = Tensor::from_f64(&[len, n], &rng.uniform_vec(len * n, -1.0, 1.0))?;
        let d_skip = Tensor::from_f64(&[d], &rng.uniform_vec(d, -1.0, 1.0))?;
        Self::selective(&a, delta, b, c, d_skip)
    }

    pub fn len(&self) -> usize {
        self.delta.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.delta.shape()[1]
    }

    pub fn state_dim(&self) -> usize {
        self.b.shape()[1]
    }

    fn check(&self) -> Result<()> {
        let (l, d) = seq_dims("ssm params", self.delta.shape())?;
        let n = self.b.shape().get(1).copied().unwrap_or(0);
        let expect: [(&Tensor<T>, Vec<usize>); 4] = [
            (&self.decay, vec![l, d, n]),
            (&self.b, vec![l, n]),
            (&self.c, vec![l, n]),
            (&self.d_skip, vec![d]),
        ];
        for (t, shape) in expect {
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("ssm params", t.shape(), &shape));
            }
        }
        if n == 0 {
            return Err(invalid!("ssm params: state dimension must be positive"));
        }
        if self.delta.data().iter().any(|&v| v <= T::zero()) {
            return Err(invalid!("ssm params: step sizes must be positive"));
        }
        Ok(())
    }
}

/// Sequential scan shared by the plain kernel and the differentiable op.
/// When `states` is given it receives `h[t]` for every step, `(L, d, N)`.
#[allow(clippy::too_many_arguments)]
fn scan<T: Real>(
    (l, d, n): (usize, usize, usize),
    x: &[T],
    delta: &[T],
    decay: impl Fn(usize, usize, usize) -> T,
    b: &[T],
    c: &[T],
    d_skip: &[T],
    mut states: Option<&mut [T]>,
) -> Vec<T> {
    let mut h = vec![T::zero(); d * n];
    let mut y = vec![T::zero(); l * d];
    for t in 0..l {
        let (bt, ct) = (&b[t * n..(t + 1) * n], &c[t * n..(t + 1) * n]);
        for ch in 0..d {
            let xv = x[t * d + ch];
            let dt = delta[t * d + ch];
            let hs = &mut h[ch * n..(ch + 1) * n];
            let mut acc = T::zero();
            for k in 0..n {
                hs[k] = decay(t, ch, k) * hs[k] + dt * bt[k] * xv;
                acc += ct[k] * hs[k];
            }
            y[t * d + ch] = acc + d_skip[ch] * xv;
        }
        if let Some(s) = states.as_deref_mut() {
            s[t * d * n..(t + 1) * d * n].copy_from_slice(&h);
        }
    }
    y
}

/// Runs the selective scan over `x` of shape `(L, d)`.
pub fn ssm_scan<T: Real>(x: &Tensor<T>, p: &SsmParams<T>) -> Result<Tensor<T>> {
    let (l, d) = seq_dims("ssm_scan", x.shape())?;
    if p.delta.shape() != [l, d] {
        return Err(Error::shape("ssm_scan", x.shape(), p.delta.shape()));
    }
    let n = p.state_dim();
    let dec = p.decay.data();
    let y = scan(
        (l, d, n),
        x.data(),
        p.delta.data(),
        |t, ch, k| dec[(t * d + ch) * n + k],
        p.b.data(),
        p.c.data(),
        p.d_skip.data(),
        None,
    );
    Tensor::new(&[l, d], y)
}

/// Dense per-channel `L×L` matrices of the scan: entry `(i, j)` for `i ≥ j`
/// is `C_iᵀ (Ā_i ⋯ Ā_{j+1}) (Δ_j B_j)`, plus `D` on the diagonal; zero above.
pub fn materialize_semiseparable<T: Real>(p: &SsmParams<T>, len: usize) -> Result<Vec<Tensor<T>>> {
    if len == 0 {
        return Err(invalid!("materialize_semiseparable: length must be positive"));
    }
    if len != p.len() {
        return Err(invalid!("materialize_semiseparable: parameters cover {} tokens, asked for {len}", p.len()));
    }
    let (l, d, n) = (len, p.channels(), p.state_dim());
    let (dec, b, c, dt) = (p.decay.data(), p.b.data(), p.c.data(), p.delta.data());
    let mut out = Vec::with_capacity(d);
    for ch in 0..d {
        let mut m = vec![T::zero(); l * l];
        let mut prod = vec![T::zero(); n];
        for j in 0..l {
            for k in 0..n {
                prod[k] = dt[j * d + ch] * b[j * n + k];
            }
            for i in j..l {
                if i > j {
                    for k in 0..n {
                        prod[k] *= dec[(i * d + ch) * n + k];
                    }
                }
                m[i * l + j] = (0..n).map(|k| c[i * n + k] * prod[k]).sum();
            }
            m[j * l + j] += p.d_skip.data()[ch];
        }
        out.push(Tensor::new(&[l, l], m)?);
    }
    Ok(out)
}

/// Applies per-channel dense matrices from [`materialize_semiseparable`].
pub fn apply_per_channel<T: Real>(mats: &[Tensor<T>], x: &Tensor<T>) -> Result<Tensor<T>> {
    let (l, d) = seq_dims("apply_per_channel", x.shape())?;
    if mats.len() != d || mats.iter().any(|m| m.shape() != [l, l]) {
        return Err(invalid!("apply_per_channel: {} matrices for a {:?} sequence", mats.len(), x.shape()));
    }
    let xd = x.data();
    let mut y = vec![T::zero(); l * d];
    for (ch, m) in mats.iter().enumerate() {
        let md = m.data();
        for i in 0..l {
            y[i * d + ch] = (0..=i).map(|j| md[i * l + j] * xd[j * d + ch]).sum();
        }
    }
    Tensor::new(&[l, d], y)
}

impl<'g, T: Real> Var<'g, T> {
    /// Differentiable selective scan of `self` `(L, d)` with step sizes
    /// `delta (L, d)`, log-decay `a (d, N)`, `b, c (L, N)` and skip `d_skip (d)`.
    pub fn selective_scan(
        self,
        delta: Var<'g, T>,
        a: Var<'g, T>,
        b: Var<'g, T>,
        c: Var<'g, T>,
        d_skip: Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        let (xv, dv, av, bv, cv, sv) = (
            self.value(),
            delta.value(),
            a.value(),
            b.value(),
            c.value(),
            d_skip.value(),
        );
        let (l, d) = seq_dims("selective_scan", xv.shape())?;
        let n = *av.shape().last().unwrap_or(&0);
        let checks: [(&Tensor<T>, [usize; 2]); 4] = [(&dv, [l, d]), (&av, [d, n]), (&bv, [l, n]), (&cv, [l, n])];
        for (t, shape) in checks {
            if t.shape() != shape {
                return Err(Error::shape("selective_scan", t.shape(), &shape));
            }
        }
        if sv.shape() != [d] {
            return Err(Error::shape("selective_scan", sv.shape(), &[d]));
        }
        let rate: Rc<Vec<T>> = Rc::new(av.data().iter().map(|&v| softplus(v)).collect());
        let mut states = vec![T::zero(); l * d * n];
        let y = {
            let (dd, r) = (dv.data(), &rate);
            scan(
                (l, d, n),
                xv.data(),
                dd,
                |t, ch, k| decay_of(r[ch * n + k], dd[t * d + ch]),
                bv.data(),
                cv.data(),
                sv.data(),
                Some(&mut states),
            )
        };
        let value = Tensor::new(&[l, d], y)?;
        let backward = Box::new(move |g: &[T], _: &[bool]| {
            let (x, dt, bb, cc, ds, aa) = (xv.data(), dv.data(), bv.data(), cv.data(), sv.data(), av.data());
            let mut gx = vec![T::zero(); l * d];
            let mut gdt = vec![T::zero(); l * d];
            let mut grate = vec![T::zero(); d * n];
            let mut gb = vec![T::zero(); l * n];
            let mut gc = vec![T::zero(); l * n];
            let mut gds = vec![T::zero(); d];
            let mut gh = vec![T::zero(); d * n];
            for t in (0..l).rev() {
                for ch in 0..d {
                    let i = t * d + ch;
                    let (gy, xt, dtt) = (g[i], x[i], dt[i]);
                    gds[ch] += gy * xt;
                    let mut gxt = gy * ds[ch];
                    let mut gdtt = T::zero();
                    let h = &states[i * n..(i + 1) * n];
                    for k in 0..n {
                        let hk = h[k];
                        gc[t * n + k] += gy * hk;
                        let ghk = gh[ch * n + k] + gy * cc[t * n + k];
                        let prev = if t > 0 { states[(i - d) * n + k] } else { T::zero() };
                        let r = rate[ch * n + k];
                        let dec = decay_of(r, dtt);
                        let gdec = ghk * prev;
                        gdtt += ghk * bb[t * n + k] * xt - gdec * r * dec;
                        grate[ch * n + k] -= gdec * dtt * dec;
                        gb[t * n + k] += ghk * dtt * xt;
                        gxt += ghk * dtt * bb[t * n + k];
                        gh[ch * n + k] = ghk * dec;
                    }
                    gx[i] = gxt;
                    gdt[i] = gdtt;
                }
            }
            let ga: Vec<T> = grate
                .iter()
                .zip(aa)
                .map(|(&g, &a)| g * sigmoid(a))
                .collect();
            vec![Some(gx), Some(gdt), Some(ga), Some(gb), Some(gc), Some(gds)]
        });
        self.graph()
            .push("selective_scan", value, &[self, delta, a, b, c, d_skip], backward)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Graph};

    #[test]
    fn severed_state_is_pure_skip() {
        let mut rng = Rng::new(3);
        let mut p = SsmParams::<f64>::random(&mut rng, 6, 2, 3).unwrap();
        p.c = Tensor::zeros(&[6, 3]);
        let x = Tensor::new(&[6, 2], rng.uniform_vec(12, -1.0, 1.0)).unwrap();
        let y = ssm_scan(&x, &p).unwrap();
        for t in 0..6 {
            for ch in 0..2 {
                assert_eq!(y.at(&[t, ch]), p.d_skip.data()[ch] * x.at(&[t, ch]));
            }
        }
    }

    #[test]
    fn single_step() {
        let mut rng = Rng::new(4);
        let p = SsmParams::<f64>::random(&mut rng, 1, 1, 4).unwrap();
        let x = Tensor::new(&[1, 1], vec![0.7]).unwrap();
        let y = ssm_scan(&x, &p).unwrap().data()[0];
        let dt = p.delta.data()[0];
        let cb: f64 = (0..4).map(|k| p.c.data()[k] * dt * p.b.data()[k]).sum();
        let want = cb * 0.7 + p.d_skip.data()[0] * 0.7;
        assert!((y - want).abs() < 1e-15);
    }

    fn ones_params(l: usize, decay: f64) -> SsmParams<f64> {
        SsmParams {
            delta: Tensor::full(&[l, 1], 1.0),
            decay: Tensor::full(&[l, 1, 1], decay),
            b: Tensor::full(&[l, 1], 1.0),
            c: Tensor::full(&[l, 1], 1.0),
            d_skip: Tensor::zeros(&[1]),
        }
    }

    #[test]
    fn unit_decay_gives_inclusive_prefix_sum() {
        let p = ones_params(4, 1.0);
        let m = &materialize_semiseparable(&p, 4).unwrap()[0];
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m.at(&[i, j]), if i >= j { 1.0 } else { 0.0 });
            }
        }
        let x = Tensor::full(&[4, 1], 1.0);
        assert_eq!(ssm_scan(&x, &p).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn zero_decay_forgets_immediately() {
        let p = ones_params(5, 0.0);
        let m = &materialize_semiseparable(&p, 5).unwrap()[0];
        for i in 0..5 {
            for j in 0..5 {
                let v = m.at(&[i, j]);
                if i == j {
                    assert_eq!(v, 1.0);
                } else {
                    assert_eq!(v, 0.0, "({i},{j})");
                }
            }
        }
    }

    #[test]
    fn scan_matches_dense_materialization() {
        let mut rng = Rng::new(1);
        let p = SsmParams::<f64>::random(&mut rng, 16, 2, 4).unwrap();
        let x = Tensor::new(&[16, 2], rng.uniform_vec(32, -1.0, 1.0)).unwrap();
        let y = ssm_scan(&x, &p).unwrap();
        let mats = materialize_semiseparable(&p, 16).unwrap();
        let want = apply_per_channel(&mats, &x).unwrap();
        assert!(y.max_abs_diff(&want).unwrap() < 1e-10);
    }

    #[test]
    fn rejects_bad_lengths() {
        let mut rng = Rng::new(2);
        let p = SsmParams::<f64>::random(&mut rng, 4, 2, 2).unwrap();
        assert!(materialize_semiseparable(&p, 0).is_err());
        assert!(ssm_scan(&Tensor::zeros(&[5, 2]), &p).is_err());
    }

    #[test]
    fn differentiable_scan_matches_plain_and_gradients() {
        let mut rng = Rng::new(8);
        let (l, d, n) = (7, 3, 2);
        let x = Tensor::new(&[l, d], rng.uniform_vec(l * d, -1.0, 1.0)).unwrap();
        let dt = Tensor::new(&[l, d], rng.uniform_vec(l * d, 0.1, 0.9)).unwrap();
        let a = Tensor::new(&[d, n], rng.uniform_vec(d * n, -1.0, 1.0)).unwrap();
        let b = Tensor::new(&[l, n], rng.uniform_vec(l * n, -1.0, 1.0)).unwrap();
        let c = Tensor::new(&[l, n], rng.uniform_vec(l * n, -1.0, 1.0)).unwrap();
        let s = Tensor::new(&[d], rng.uniform_vec(d, -1.0, 1.0)).unwrap();
        let p = SsmParams::selective(&a, dt.clone(), b.clone(), c.clone(), s.clone()).unwrap();
        let want = ssm_scan(&x, &p).unwrap();
        let g = Graph::new();
        let got = g
            .constant(x.clone())
            .selective_scan(g.constant(dt.clone()), g.constant(a.clone()), g.constant(b.clone()), g.constant(c.clone()), g.constant(s.clone()))
            .unwrap()
            .value();
        assert_eq!(got.data(), want.data());

        let w = Tensor::new(&[l, d], rng.uniform_vec(l * d, -1.0, 1.0)).unwrap();
        let inputs = [x, dt, a, b, c, s];
        for which in 0..inputs.len() {
            let report = grad_check(
                |g, v| {
                    let mut vars: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
                    vars[which] = v;
                    let y = vars[0].selective_scan(vars[1], vars[2], vars[3], vars[4], vars[5])?;
                    y.mul(g.constant(w.clone()))?.sum()
                },
                &inputs[which],
                1e-6,
            )
            .unwrap();
            assert!(report.max_rel_err < 1e-7, "input {which}: {report:?}");
        }
    }
}
