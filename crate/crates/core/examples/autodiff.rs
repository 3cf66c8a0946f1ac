//! Reverse-mode gradients on the tape and a finite-difference check.

use volumix::tensor::{grad_check, Graph, Tensor};

fn main() -> volumix::Result<()> {
    let g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_f64(&[3], &[1.0, 2.0, 3.0])?);
    let y = x.mul(x)?.sum()?;
    let grads = g.backward(y)?;
    println!("d/dx sum(x*x) at (1,2,3) = {:?}", grads.wrt(x)?.data());

    let w = Tensor::from_f64(&[2, 4], &[0.3, -0.1, 0.8, 0.5, -0.7, 0.2, 0.1, 0.9])?;
    let report = grad_check(|g, v| v.sigmoid()?.matmul(g.constant(Tensor::full(&[4, 1], 0.5)))?.sum(), &w, 1e-5)?;
    println!("sigmoid·matmul: max relative error {:.2e} over {} coordinates", report.max_rel_err, report.checked);
    Ok(())
}
