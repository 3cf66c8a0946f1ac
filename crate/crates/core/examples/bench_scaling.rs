//! Kernel time per doubling of the sequence length: the scans grow
//! linearly, the dense oracles quadratically.

use volumix::seqmix::{bench_kernel, BenchKernel};

fn main() -> volumix::Result<()> {
    let lengths = [256, 512, 1024, 2048];
    for kernel in BenchKernel::ALL {
        let times: Vec<u64> = lengths
            .iter()
            .map(|&l| bench_kernel(kernel, l, 4, 4, 0).map(|r| r.wall_ns))
            .collect::<volumix::Result<_>>()?;
        let ratios: Vec<String> = times.windows(2).map(|w| format!("{:.2}", w[1] as f64 / w[0] as f64)).collect();
        println!("{:<10} ns {:?}  growth per doubling [{}]", kernel.name(), times, ratios.join(", "));
    }
    Ok(())
}
