//! Central finite-difference verification of reverse-mode gradients.

use super::{Graph, Tensor, Var};
use crate::error::{invalid, Result};

/// Outcome of a gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// max |analytic - numeric| / max(1, |numeric|) over checked coordinates
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub checked: usize,
}

/// Checks every coordinate of `x`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph<f64>, Var<'g, f64>) -> Result<Var<'g, f64>>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    grad_check_at(f, x, eps, &all)
}

/// Checks the listed flat coordinates of `x` only.
pub fn grad_check_at<F>(f: F, x: &Tensor<f64>, eps: f64, coords: &[usize]) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph<f64>, Var<'g, f64>) -> Result<Var<'g, f64>>,
{
    let eval = |t: Tensor<f64>| -> Result<f64> {
        let g = Graph::new();
        let y = f(&g, g.constant(t))?;
        scalar(&y)
    };
    let analytic = {
        let g = Graph::new();
        let leaf = g.leaf(x.clone());
        let y = f(&g, leaf)?;
        scalar(&y)?;
        g.backward(y)?.wrt(leaf)?
    };
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: 0,
        checked: 0,
    };
    for &i in coords {
        if i >= x.numel() {
            return Err(invalid!("grad_check: coordinate {i} out of range"));
        }
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        if err > report.max_rel_err || report.checked == 0 {
            report.max_rel_err = report.max_rel_err.max(err);
            if err >= report.max_rel_err {
                report.worst_index = i;
            }
        }
        report.checked += 1;
    }
    Ok(report)
}

fn scalar(y: &Var<'_, f64>) -> Result<f64> {
    let v = y.value();
    if v.numel() != 1 {
        return Err(invalid!("grad_check needs a scalar function, got shape {:?}", v.shape()));
    }
    Ok(v.data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn sigmoid_sum() {
        let mut rng = Rng::new(0);
        let x = Tensor::new(&[16], rng.uniform_vec(16, -2.0, 2.0)).unwrap();
        let r = grad_check(|_, x| x.sigmoid()?.sum(), &x, 1e-5).unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
        assert_eq!(r.checked, 16);
    }

    #[test]
    fn linear_map_is_exact() {
        let x = Tensor::new(&[5], vec![0.3, -1.0, 2.5, 7.0, -0.25]).unwrap();
        let r = grad_check(|_, x| x.sum(), &x, 1e-5).unwrap();
        assert!(r.max_rel_err < 1e-12 + 1e-9, "{r:?}");
    }

    #[test]
    fn rejects_non_scalar() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        assert!(grad_check(|_, x| x.sigmoid(), &x, 1e-5).is_err());
    }
}
