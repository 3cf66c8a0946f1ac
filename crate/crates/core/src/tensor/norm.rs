use std::rc::Rc;

use super::{axis_split, Real, Tensor, Var};
use crate::error::{invalid, Result};

pub const NORM_EPS: f64 = 1e-5;

impl<'g, T: Real> Var<'g, T> {
    /// Zero-mean, unit-variance along `axis` (biased variance, no affine).
    pub fn standardize(self, axis: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(invalid!("standardize: axis {axis} out of range for {:?}", x.shape()));
        }
        let (outer, n, inner) = axis_split(x.shape(), axis);
        let eps = T::lit(NORM_EPS);
        let nf = T::lit(n as f64);
        let xd = x.data();
        let mut out = vec![T::zero(); xd.len()];
        let mut inv_std = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for r in 0..inner {
                let at = |i: usize| (o * n + i) * inner + r;
                let mean = (0..n).map(|i| xd[at(i)]).sum::<T>() / nf;
                let var = (0..n).map(|i| (xd[at(i)] - mean).powi(2)).sum::<T>() / nf;
                let s = T::one() / (var + eps).sqrt();
                inv_std[o * inner + r] = s;
                for i in 0..n {
                    out[at(i)] = (xd[at(i)] - mean) * s;
                }
            }
        }
        let value = Tensor::new(x.shape(), out)?;
        let y = Rc::new(value.clone());
        let backward = Box::new(move |g: &[T], _: &[bool]| {
            let yd = y.data();
            let mut gx = vec![T::zero(); yd.len()];
            for o in 0..outer {
                for r in 0..inner {
                    let at = |i: usize| (o * n + i) * inner + r;
                    let gm = (0..n).map(|i| g[at(i)]).sum::<T>() / nf;
                    let gy = (0..n).map(|i| g[at(i)] * yd[at(i)]).sum::<T>() / nf;
                    let s = inv_std[o * inner + r];
                    for i in 0..n {
                        gx[at(i)] = s * (g[at(i)] - gm - yd[at(i)] * gy);
                    }
                }
            }
            vec![Some(gx)]
        });
        self.graph().push("standardize", value, &[self], backward)
    }

    /// Instance normalization of a `(C, ...)` map: each channel over all its
    /// remaining positions.
    pub fn instance_norm(self) -> Result<Var<'g, T>> {
        let shape = self.shape();
        let c = *shape.first().ok_or_else(|| invalid!("instance_norm on a scalar"))?;
        let rest = super::numel(&shape[1..]);
        self.reshape(&[c, rest])?.standardize(1)?.reshape(&shape)
    }

    /// Layer normalization across the channel axis of a `(C, ...)` map.
    pub fn channel_norm(self) -> Result<Var<'g, T>> {
        self.standardize(0)
    }
}
