//! Sequence mixers over `(L, d)` token matrices, each with a dense oracle.
//!
//! - [`ssm_scan`]: diagonal selective state space recurrence (causal).
//! - [`quasiseparable_matmul`]: bidirectional mixer built from two causal
//!   semiseparable scans, shifts and flips.
//! - [`gated_cnn_mix`]: the convolution-only token mixer.
//!
//! The plain functions take explicit per-token parameters and are what the
//! oracles verify. The `Var` methods are the differentiable kernels the
//! model layers ([`SelectiveSsm`], [`QuasiMixer`], [`GatedSeqMixer`]) use.

mod bench;
mod gated;
mod layers;
mod quasi;
mod ssm;

pub use bench::{bench_kernel, BenchKernel, BenchRow};
pub use gated::gated_cnn_mix;
pub use layers::{ConvMode, GatedSeqMixer, QuasiMixer, SelectiveSsm, SeqMixer};
pub use quasi::{quasiseparable_materialize, quasiseparable_matmul, quasiseparable_mix, QuasiParams, Triple};
pub use ssm::{apply_per_channel, materialize_semiseparable, ssm_scan, SsmParams};

use crate::error::{invalid, Result};
use crate::tensor::Real;

/// Validates an `(L, d)` token matrix shape.
pub(crate) fn seq_dims(op: &str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [l, d] if *l >= 1 && *d >= 1 => Ok((*l, *d)),
        _ => Err(invalid!("{op}: expected a non-empty (L, d) sequence, got {shape:?}")),
    }
}

/// Dense `M · x` for an `L×L` matrix and an `(L, d)` sequence.
pub fn dense_apply<T: Real>(l: usize, d: usize, m: &[T], x: &[T]) -> Vec<T> {
    let mut y = vec![T::zero(); l * d];
    for i in 0..l {
        for j in 0..l {
            let w = m[i * l + j];
            if w != T::zero() {
                for ch in 0..d {
                    y[i * d + ch] += w * x[j * d + ch];
                }
            }
        }
    }
    y
}
