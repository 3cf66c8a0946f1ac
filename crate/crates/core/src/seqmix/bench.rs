//! Wall-clock timing of the mixing kernels against their dense oracles.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use super::{
    apply_per_channel, dense_apply, materialize_semiseparable, quasiseparable_materialize,
    quasiseparable_matmul, ssm_scan, QuasiParams, SsmParams,
};
use crate::error::{invalid, Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchKernel {
    /// Sequential selective scan.
    Scan,
    /// Quasiseparable mixing through the scan decomposition.
    Quasi,
    /// Materialized semiseparable matrices, then dense products.
    DenseScan,
    /// Materialized quasiseparable matrix, then a dense product.
    DenseQuasi,
}

impl BenchKernel {
    pub const ALL: [BenchKernel; 4] = [
        BenchKernel::Scan,
        BenchKernel::Quasi,
        BenchKernel::DenseScan,
        BenchKernel::DenseQuasi,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BenchKernel::Scan => "scan",
            BenchKernel::Quasi => "qs",
            BenchKernel::DenseScan => "dense_scan",
            BenchKernel::DenseQuasi => "dense_qs",
        }
    }
}

impl fmt::Display for BenchKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BenchKernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BenchKernel::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| invalid!("unknown kernel {s:?} (expected scan, qs, dense_scan or dense_qs)"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub kernel: BenchKernel,
    pub len: usize,
    pub state_dim: usize,
    pub channels: usize,
    /// Best per-call time over several batches.
    pub wall_ns: u64,
    /// Sum of the kernel output, to keep the work observable.
    pub checksum: f64,
}

impl BenchRow {
    pub const HEADER: &'static str = "kernel,L,N,d,wall_ns,checksum";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{:.12e}",
            self.kernel, self.len, self.state_dim, self.channels, self.wall_ns, self.checksum
        )
    }
}

/// Runs `f` in batches lasting at least `min_ns` and returns the best
/// average per-call time and the last output.
fn time_best(min_ns: u128, mut f: impl FnMut() -> Result<Tensor<f64>>) -> Result<(u64, Tensor<f64>)> {
    let mut out = f()?;
    let mut best = u128::MAX;
    for _ in 0..3 {
        let start = Instant::now();
        let mut calls = 0u128;
        while calls == 0 || start.elapsed().as_nanos() < min_ns {
            out = f()?;
            calls += 1;
        }
        best = best.min(start.elapsed().as_nanos() / calls);
    }
    Ok((best as u64, out))
}

/// Times one kernel at sequence length `len`, state size `n`, `d` channels.
pub fn bench_kernel(kernel: BenchKernel, len: usize, n: usize, d: usize, seed: u64) -> Result<BenchRow> {
    if len == 0 || n == 0 || d == 0 {
        return Err(invalid!("bench: L, N and d must be positive"));
    }
    let mut rng = Rng::new(seed);
    let x = Tensor::new(&[len, d], rng.uniform_vec(len * d, -1.0, 1.0))?;
    let min_ns = 20_000_000;
    let (wall_ns, out) = match kernel {
        BenchKernel::Scan | BenchKernel::DenseScan => {
            let p = SsmParams::<f64>::random(&mut rng, len, d, n)?;
            if kernel == BenchKernel::Scan {
                time_best(min_ns, || ssm_scan(&x, &p))?
            } else {
                time_best(min_ns, || apply_per_channel(&materialize_semiseparable(&p, len)?, &x))?
            }
        }
        BenchKernel::Quasi | BenchKernel::DenseQuasi => {
            let q = QuasiParams::<f64>::random(&mut rng, len, n, true)?;
            if kernel == BenchKernel::Quasi {
                time_best(min_ns, || quasiseparable_matmul(&x, &q))?
            } else {
                time_best(min_ns, || {
                    let m = quasiseparable_materialize(&q)?;
                    Tensor::new(&[len, d], dense_apply(len, d, m.data(), x.data()))
                })?
            }
        }
    };
    Ok(BenchRow {
        kernel,
        len,
        state_dim: n,
        channels: d,
        wall_ns,
        checksum: out.sum(),
    })
}
