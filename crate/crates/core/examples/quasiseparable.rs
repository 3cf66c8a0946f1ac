//! Bidirectional quasiseparable mixing: the scan decomposition against the
//! dense matrix, and its two-sided receptive field.

use volumix::rng::Rng;
use volumix::seqmix::{dense_apply, quasiseparable_materialize, quasiseparable_matmul, QuasiParams};
use volumix::tensor::Tensor;

fn main() -> volumix::Result<()> {
    let mut rng = Rng::new(2);
    let (l, n, d) = (12, 3, 2);
    for diagonal in [true, false] {
        let q = QuasiParams::<f64>::random(&mut rng, l, n, diagonal)?;
        let x = Tensor::new(&[l, d], rng.uniform_vec(l * d, -1.0, 1.0))?;
        let y = quasiseparable_matmul(&x, &q)?;
        let m = quasiseparable_materialize(&q)?;
        let dense = dense_apply(l, d, m.data(), x.data());
        let err = y.data().iter().zip(&dense).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let upper = (0..l).flat_map(|i| (i + 1..l).map(move |j| (i, j))).filter(|&(i, j)| m.at(&[i, j]) != 0.0).count();
        println!(
            "{} transitions: max |diff| = {err:.2e}, nonzero entries above the diagonal = {upper}",
            if diagonal { "diagonal" } else { "full" }
        );
    }
    Ok(())
}
