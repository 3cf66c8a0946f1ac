//! Blocked matrix product used by matmul and by the convolution lowering.
//!
//! Every output element accumulates its `k` terms strictly in increasing `k`
//! order on top of whatever the output buffer already holds. A naive
//! `acc = init; for k { acc += a*b }` loop therefore produces bit-identical
//! results, which is what the convolution reference test relies on.
//!
//! Row-major operands are read in place; only transposed ones are packed.
//! A large transposed right operand is handled by computing the transposed
//! product instead, so big im2col buffers are never copied.

use std::any::TypeId;

use rayon::prelude::*;

use super::Real;
use crate::parallel;

const MR: usize = 4;
const NR: usize = 16;
/// Depth of one k slab.
const KC: usize = 256;

/// `out[m×n] += a[m×k] · b[k×n]`, all row-major.
pub fn matmul_into<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    matmul_t(m, k, n, Operand::Plain(a), Operand::Plain(b), out)
}

/// A GEMM operand, either as stored or read through a transpose.
#[derive(Clone, Copy)]
pub(crate) enum Operand<'a, T> {
    Plain(&'a [T]),
    /// The stored matrix is the transpose of the logical operand.
    Trans(&'a [T]),
}

impl<'a, T: Copy> Operand<'a, T> {
    fn data(&self) -> &'a [T] {
        match *self {
            Operand::Plain(d) | Operand::Trans(d) => d,
        }
    }

    /// The same storage read as the transposed operand.
    fn flipped(self) -> Self {
        match self {
            Operand::Plain(d) => Operand::Trans(d),
            Operand::Trans(d) => Operand::Plain(d),
        }
    }

    /// Element `(i, j)` of a logical `rows×cols` matrix.
    #[inline(always)]
    fn at(&self, rows: usize, cols: usize, i: usize, j: usize) -> T {
        match *self {
            Operand::Plain(d) => d[i * cols + j],
            Operand::Trans(d) => d[j * rows + i],
        }
    }
}

/// [`matmul_into`] with either operand optionally transposed in storage.
pub(crate) fn matmul_t<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: Operand<'_, T>,
    b: Operand<'_, T>,
    out: &mut [T],
) {
    assert_eq!(a.data().len(), m * k, "lhs length");
    assert_eq!(b.data().len(), k * n, "rhs length");
    assert_eq!(out.len(), m * n, "output length");
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // outᵀ += bᵀ · aᵀ when that reads the big operand in place (a large
    // transposed right side, worth more than transposing the output twice)
    // or fills the kernel's width (a very narrow output next to a transposed
    // left side).
    let flip = match (a, b) {
        (Operand::Plain(_), Operand::Trans(_)) => n > m && k > 2 * m,
        (Operand::Trans(_), _) => n <= 16 && m > 4 * n,
        _ => false,
    };
    if flip {
        let mut tmp = transpose(m, n, out);
        matmul_t(n, k, m, b.flipped(), a.flipped(), &mut tmp);
        transpose_into(n, m, &tmp, out);
        return;
    }
    #[cfg(target_arch = "x86_64")]
    if TypeId::of::<T>() == TypeId::of::<f32>() && simd::available() {
        // SAFETY: T is f32, checked above.
        let cast = |o: Operand<'_, T>| {
            let d = o.data();
            let d = unsafe { std::slice::from_raw_parts(d.as_ptr().cast::<f32>(), d.len()) };
            match o {
                Operand::Plain(_) => Operand::Plain(d),
                Operand::Trans(_) => Operand::Trans(d),
            }
        };
        let out = unsafe { std::slice::from_raw_parts_mut(out.as_mut_ptr().cast::<f32>(), out.len()) };
        blocked::<f32, { simd::MR }, { simd::NR }>(m, k, n, cast(a), cast(b), out, simd::kernel);
        return;
    }
    blocked::<T, MR, NR>(m, k, n, a, b, out, kernel::<T>);
}

/// A strided view of an operand tile: element `(r, kk)` of the left tile is
/// `data[r * rs + kk * ks]`; row `kk` of the right tile starts at
/// `data[kk * ks]`.
#[derive(Clone, Copy)]
struct Tile<'a, T> {
    data: &'a [T],
    rs: usize,
    ks: usize,
}

/// `(rows, cols, depth, lhs, rhs, out, ldo, col0)`
type Kernel<T> = fn(usize, usize, usize, Tile<'_, T>, Tile<'_, T>, &mut [T], usize, usize);

/// Streams k slabs of each right panel (kept cache-resident) against every
/// block of `R` rows.
#[allow(clippy::too_many_arguments)]
fn blocked<T: Real, const R: usize, const C: usize>(
    m: usize,
    k: usize,
    n: usize,
    a: Operand<'_, T>,
    b: Operand<'_, T>,
    out: &mut [T],
    kern: Kernel<T>,
) {
    let panels = match b {
        Operand::Plain(_) => None,
        Operand::Trans(_) => Some(pack_panels::<T, C>(k, n, b)),
    };
    let packed_rows = match a {
        Operand::Plain(_) => None,
        Operand::Trans(_) => Some(pack_rows::<T, R>(m, k, a)),
    };
    // Row-major left operand: a ragged last block is packed (zero-padded)
    // so the kernel can always read R rows.
    let tail = match a {
        Operand::Plain(d) if !m.is_multiple_of(R) => {
            let r0 = m - m % R;
            Some(pack_rows::<T, R>(m - r0, k, Operand::Plain(&d[r0 * k..])))
        }
        _ => None,
    };
    let lhs = |row: usize, k0: usize| -> Tile<'_, T> {
        match (&packed_rows, &tail, a) {
            (Some(p), _, _) => Tile { data: &p[(row / R) * k * R + k0 * R..], rs: 1, ks: R },
            (None, Some(t), _) if row + R > m => Tile { data: &t[k0 * R..], rs: 1, ks: R },
            (_, _, a) => Tile { data: &a.data()[row * k + k0..], rs: k, ks: 1 },
        }
    };
    let rhs = |j0: usize, k0: usize| -> Tile<'_, T> {
        match &panels {
            Some(p) => Tile { data: &p[(j0 / C) * k * C + k0 * C..], rs: 0, ks: C },
            None => Tile { data: &b.data()[k0 * n + j0..], rs: 0, ks: n },
        }
    };
    let group = |(gi, rows): (usize, &mut [T]), per: usize| {
        let r0 = gi * per;
        let nrows = rows.len() / n;
        for k0 in (0..k).step_by(KC) {
            let kc = (k - k0).min(KC);
            for j0 in (0..n).step_by(C) {
                let nr = (n - j0).min(C);
                let panel = rhs(j0, k0);
                for i in (0..nrows).step_by(R) {
                    let mr = (nrows - i).min(R);
                    kern(mr, nr, kc, lhs(r0 + i, k0), panel, &mut rows[i * n..], n, j0);
                }
            }
        }
    };
    let threads = parallel::threads();
    if threads > 1 && m >= 2 * R && (m * n * k) >= 1 << 16 {
        let blocks = m.div_ceil(R);
        let per = blocks.div_ceil(threads) * R;
        parallel::install(|| {
            out.par_chunks_mut(per * n)
                .enumerate()
                .for_each(|c| group(c, per))
        });
    } else {
        group((0, out), m);
    }
}

/// Repacks `b` into column panels of width `C`, each stored k-major.
fn pack_panels<T: Real, const C: usize>(k: usize, n: usize, b: Operand<'_, T>) -> Vec<T> {
    let np = n.div_ceil(C);
    let mut packed = vec![T::zero(); np * k * C];
    for (pj, panel) in packed.chunks_exact_mut(k * C).enumerate() {
        let j0 = pj * C;
        let nr = (n - j0).min(C);
        match b {
            Operand::Plain(b) => {
                for (kk, dst) in panel.chunks_exact_mut(C).enumerate() {
                    dst[..nr].copy_from_slice(&b[kk * n + j0..kk * n + j0 + nr]);
                }
            }
            Operand::Trans(bt) => {
                for j in 0..nr {
                    for (kk, &v) in bt[(j0 + j) * k..(j0 + j + 1) * k].iter().enumerate() {
                        panel[kk * C + j] = v;
                    }
                }
            }
        }
    }
    packed
}

/// Interleaves each block of `R` rows into k-major groups of `R`.
fn pack_rows<T: Real, const R: usize>(m: usize, k: usize, a: Operand<'_, T>) -> Vec<T> {
    let nb = m.div_ceil(R);
    let mut packed = vec![T::zero(); nb * k * R];
    match a {
        Operand::Plain(a) => {
            for (i, row) in a.chunks_exact(k).take(m).enumerate() {
                let blk = &mut packed[(i / R) * k * R..];
                for (kk, &v) in row.iter().enumerate() {
                    blk[kk * R + i % R] = v;
                }
            }
        }
        Operand::Trans(_) => {
            for (blk_i, blk) in packed.chunks_exact_mut(k * R).enumerate() {
                let i0 = blk_i * R;
                for (kk, dst) in blk.chunks_exact_mut(R).enumerate() {
                    for (r, d) in dst.iter_mut().enumerate().take((m - i0).min(R)) {
                        *d = a.at(m, k, i0 + r, kk);
                    }
                }
            }
        }
    }
    packed
}

#[allow(clippy::too_many_arguments)]
fn kernel<T: Real>(mr: usize, nr: usize, kc: usize, a: Tile<'_, T>, b: Tile<'_, T>, out: &mut [T], ldo: usize, j0: usize) {
    let mut acc = [[T::zero(); NR]; MR];
    for r in 0..mr {
        acc[r][..nr].copy_from_slice(&out[r * ldo + j0..r * ldo + j0 + nr]);
    }
    for kk in 0..kc {
        let bv = &b.data[kk * b.ks..kk * b.ks + nr];
        for (r, row) in acc.iter_mut().enumerate().take(mr) {
            let av = a.data[r * a.rs + kk * a.ks];
            for (x, &y) in row.iter_mut().zip(bv) {
                *x += av * y;
            }
        }
    }
    for r in 0..mr {
        out[r * ldo + j0..r * ldo + j0 + nr].copy_from_slice(&acc[r][..nr]);
    }
}

/// AVX-512 micro-kernel for `f32`. Multiply and add stay separate
/// instructions so rounding matches the scalar path exactly.
#[cfg(target_arch = "x86_64")]
mod simd {
    use std::arch::x86_64::*;
    use std::sync::OnceLock;

    use super::Tile;

    pub const MR: usize = 8;
    pub const NR: usize = 32;

    pub fn available() -> bool {
        static HAS: OnceLock<bool> = OnceLock::new();
        *HAS.get_or_init(|| is_x86_feature_detected!("avx512f"))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn kernel(mr: usize, nr: usize, kc: usize, a: Tile<'_, f32>, b: Tile<'_, f32>, out: &mut [f32], ldo: usize, j0: usize) {
        assert!(kc > 0 && mr <= MR && nr <= NR);
        assert!(a.data.len() > (MR - 1) * a.rs + (kc - 1) * a.ks);
        assert!(b.data.len() >= (kc - 1) * b.ks + nr);
        assert!(out.len() >= (mr - 1) * ldo + j0 + nr);
        // SAFETY: feature checked by `available`; every access is covered by
        // the bounds asserted above (right-tile loads are masked to `nr`).
        unsafe { kernel_avx512(mr, nr, kc, a, b, out, ldo, j0) }
    }

    #[allow(clippy::too_many_arguments)]
    #[target_feature(enable = "avx512f")]
    unsafe fn kernel_avx512(
        mr: usize,
        nr: usize,
        kc: usize,
        a: Tile<'_, f32>,
        b: Tile<'_, f32>,
        out: &mut [f32],
        ldo: usize,
        j0: usize,
    ) {
        let m0: __mmask16 = if nr >= 16 { 0xffff } else { ((1u32 << nr) - 1) as u16 };
        let m1: __mmask16 = if nr >= 32 { 0xffff } else if nr > 16 { ((1u32 << (nr - 16)) - 1) as u16 } else { 0 };
        let zero = _mm512_setzero_ps();
        let mut acc = [[zero; 2]; MR];
        let o = out.as_mut_ptr().add(j0);
        for (r, row) in acc.iter_mut().enumerate().take(mr) {
            let p = o.add(r * ldo);
            row[0] = _mm512_maskz_loadu_ps(m0, p);
            row[1] = _mm512_maskz_loadu_ps(m1, p.add(16));
        }
        let (ap, bp) = (a.data.as_ptr(), b.data.as_ptr());
        for kk in 0..kc {
            let bk = bp.add(kk * b.ks);
            let b0 = _mm512_maskz_loadu_ps(m0, bk);
            let b1 = _mm512_maskz_loadu_ps(m1, bk.add(16));
            let ak = ap.add(kk * a.ks);
            for (r, row) in acc.iter_mut().enumerate() {
                let x = _mm512_set1_ps(*ak.add(r * a.rs));
                row[0] = _mm512_add_ps(row[0], _mm512_mul_ps(x, b0));
                row[1] = _mm512_add_ps(row[1], _mm512_mul_ps(x, b1));
            }
        }
        for (r, row) in acc.iter().enumerate().take(mr) {
            let p = o.add(r * ldo);
            _mm512_mask_storeu_ps(p, m0, row[0]);
            _mm512_mask_storeu_ps(p.add(16), m1, row[1]);
        }
    }
}

/// Row-major transpose of an `rows×cols` matrix.
pub(crate) fn transpose<T: Real>(rows: usize, cols: usize, src: &[T]) -> Vec<T> {
    let mut dst = vec![T::zero(); rows * cols];
    transpose_into(rows, cols, src, &mut dst);
    dst
}

fn transpose_into<T: Real>(rows: usize, cols: usize, src: &[T], dst: &mut [T]) {
    const B: usize = 32;
    for i0 in (0..rows).step_by(B) {
        for j0 in (0..cols).step_by(B) {
            for i in i0..(i0 + B).min(rows) {
                for j in j0..(j0 + B).min(cols) {
                    dst[j * rows + i] = src[i * cols + j];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], init: &[f64]) -> Vec<f64> {
        let mut out = init.to_vec();
        for i in 0..m {
            for j in 0..n {
                let mut acc = out[i * n + j];
                for kk in 0..k {
                    acc += a[i * k + kk] * b[kk * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        out
    }

    #[test]
    fn matches_naive_bitwise_on_ragged_shapes() {
        let mut rng = Rng::new(11);
        for &(m, k, n) in &[(1, 1, 1), (3, 7, 5), (4, 16, 16), (9, 33, 37), (17, 5, 70)] {
            let a = rng.uniform_vec(m * k, -1.0, 1.0);
            let b = rng.uniform_vec(k * n, -1.0, 1.0);
            let init = rng.uniform_vec(m * n, -1.0, 1.0);
            let mut out = init.clone();
            matmul_into(m, k, n, &a, &b, &mut out);
            let want = naive(m, k, n, &a, &b, &init);
            for (x, y) in out.iter().zip(&want) {
                assert_eq!(x.to_bits(), y.to_bits(), "m={m} k={k} n={n}");
            }
        }
    }

    #[test]
    fn transposed_operands_match_plain() {
        let mut rng = Rng::new(12);
        let (m, k, n) = (13, 21, 40);
        let a = rng.uniform_vec(m * k, -1.0, 1.0);
        let b = rng.uniform_vec(k * n, -1.0, 1.0);
        let mut want = vec![0.0; m * n];
        matmul_into(m, k, n, &a, &b, &mut want);
        let (at, bt) = (transpose(m, k, &a), transpose(k, n, &b));
        let mut got = vec![0.0; m * n];
        matmul_t(m, k, n, Operand::Trans(&at), Operand::Trans(&bt), &mut got);
        assert_eq!(got, want);
        let a32: Vec<f32> = a.iter().map(|&v| v as f32).collect();
        let b32: Vec<f32> = b.iter().map(|&v| v as f32).collect();
        let mut w32 = vec![0.0f32; m * n];
        matmul_into(m, k, n, &a32, &b32, &mut w32);
        let mut g32 = vec![0.0f32; m * n];
        matmul_t(m, k, n, Operand::Plain(&a32), Operand::Trans(&transpose(k, n, &b32)), &mut g32);
        assert_eq!(g32, w32);
    }

    #[test]
    fn transposed_routes_match_naive_bitwise() {
        // Shapes that take the transposed-product route: a large transposed
        // right side, and a very narrow output with a transposed left side.
        let mut rng = Rng::new(13);
        for &(m, k, n, ta, tb) in &[(5, 300, 40, false, true), (70, 9, 3, true, false), (41, 600, 45, false, true)] {
            let a = rng.uniform_vec(m * k, -1.0, 1.0);
            let b = rng.uniform_vec(k * n, -1.0, 1.0);
            let init = rng.uniform_vec(m * n, -1.0, 1.0);
            let want = naive(m, k, n, &a, &b, &init);
            let (at, bt) = (transpose(m, k, &a), transpose(k, n, &b));
            let lhs = if ta { Operand::Trans(&at[..]) } else { Operand::Plain(&a[..]) };
            let rhs = if tb { Operand::Trans(&bt[..]) } else { Operand::Plain(&b[..]) };
            let mut out = init.clone();
            matmul_t(m, k, n, lhs, rhs, &mut out);
            for (x, y) in out.iter().zip(&want) {
                assert_eq!(x.to_bits(), y.to_bits(), "m={m} k={k} n={n}");
            }

            let f = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
            let (a32, b32, i32_) = (f(&a), f(&b), f(&init));
            let mut want32 = i32_.clone();
            matmul_into(m, k, n, &a32, &b32, &mut want32);
            let (at32, bt32) = (transpose(m, k, &a32), transpose(k, n, &b32));
            let lhs = if ta { Operand::Trans(&at32[..]) } else { Operand::Plain(&a32[..]) };
            let rhs = if tb { Operand::Trans(&bt32[..]) } else { Operand::Plain(&b32[..]) };
            let mut out32 = i32_;
            matmul_t(m, k, n, lhs, rhs, &mut out32);
            assert_eq!(out32, want32, "f32 m={m} k={k} n={n}");
        }
    }

    #[test]
    fn transpose_roundtrip() {
        let src: Vec<f32> = (0..35).map(|v| v as f32).collect();
        let t = transpose(5, 7, &src);
        assert_eq!(t[0], 0.0);
        assert_eq!(t[5], 1.0);
        assert_eq!(transpose(7, 5, &t), src);
    }
}
