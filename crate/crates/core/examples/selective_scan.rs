//! The selective scan against its materialized semiseparable matrix, and
//! a perturbation showing the scan never looks ahead.

use volumix::rng::Rng;
use volumix::seqmix::{apply_per_channel, materialize_semiseparable, ssm_scan, SsmParams};
use volumix::tensor::Tensor;

fn main() -> volumix::Result<()> {
    let mut rng = Rng::new(1);
    let (l, d, n) = (16, 2, 4);
    let p = SsmParams::<f64>::random(&mut rng, l, d, n)?;
    let x = Tensor::new(&[l, d], rng.uniform_vec(l * d, -1.0, 1.0))?;

    let y = ssm_scan(&x, &p)?;
    let mats = materialize_semiseparable(&p, l)?;
    let dense = apply_per_channel(&mats, &x)?;
    println!("scan vs dense: max |diff| = {:.2e}", y.max_abs_diff(&dense)?);

    let row = |i: usize| (0..l).map(|j| format!("{:+.2}", mats[0].at(&[i, j]))).collect::<Vec<_>>().join(" ");
    println!("channel 0, rows 0..4 (lower triangular):");
    for i in 0..4 {
        println!("  {}", row(i));
    }

    let mut bumped = x.clone();
    bumped.data_mut()[8 * d] += 1.0;
    let moved = ssm_scan(&bumped, &p)?;
    let first_changed = (0..l).find(|&t| (0..d).any(|c| moved.at(&[t, c]) != y.at(&[t, c])));
    println!("perturbing token 8 first changes output {first_changed:?}");
    Ok(())
}
