//! Parameterized sequence mixers over `(L, d)` token matrices.

use super::{quasiseparable_mix, seq_dims, QuasiParams, SsmParams, Triple};
use crate::error::Result;
use crate::nn::{Builder, Conv3d, Ctx, Linear, ParamId};
use crate::tensor::{Conv3dSpec, Real, Tensor, Var};

/// `softplus⁻¹(k + 1)` for state index `k`, so the initial decay rates are
/// `1, 2, …, N`.
fn rate_init(n: usize) -> Vec<f64> {
    (0..n).map(|k| ((k as f64 + 1.0).exp() - 1.0).ln()).collect()
}

/// Step-size bias: `softplus⁻¹` of a log-uniform draw in `[1e-3, 1e-1]`.
fn dt_bias_init<T: Real>(b: &mut Builder<'_, T>, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let dt = (b.rng().uniform(1e-3f64.ln(), 1e-1f64.ln())).exp();
            dt + (-(-dt).exp_m1()).ln()
        })
        .collect()
}

/// Selective SSM mixer: per-token `Δ, B, C` from linear projections of the
/// tokens, then [`Var::selective_scan`]. `Δ` goes through a rank-`r`
/// bottleneck.
#[derive(Debug, Clone)]
pub struct SelectiveSsm {
    pub x_proj: Linear,
    pub dt_proj: Linear,
    pub a: ParamId,
    pub d_skip: ParamId,
    pub channels: usize,
    pub state_dim: usize,
    pub dt_rank: usize,
}

impl SelectiveSsm {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, d: usize, n: usize, dt_rank: usize) -> Result<Self> {
        let x_proj = b.linear("x_proj", d, dt_rank + 2 * n, false)?;
        let dt_proj = b.linear("dt_proj", dt_rank, d, true)?;
        let bias = dt_bias_init(b, d);
        if let Some(id) = dt_proj.bias {
            b.overwrite(id, &bias)?;
        }
        let rates = rate_init(n);
        let a_init: Vec<f64> = (0..d).flat_map(|_| rates.iter().copied()).collect();
        let a = b.param("a_log", Tensor::from_f64(&[d, n], &a_init)?)?;
        let d_skip = b.constant("d_skip", &[d], 1.0)?;
        Ok(SelectiveSsm {
            x_proj,
            dt_proj,
            a,
            d_skip,
            channels: d,
            state_dim: n,
            dt_rank,
        })
    }

    /// Per-token step sizes `(L, d)` and `B, C` `(L, N)`.
    pub fn terms<'g, T: Real>(
        &self,
        ctx: &Ctx<'g, T>,
        x: Var<'g, T>,
    ) -> Result<(Var<'g, T>, Var<'g, T>, Var<'g, T>)> {
        let (r, n) = (self.dt_rank, self.state_dim);
        let p = self.x_proj.forward(ctx, x)?;
        let delta = self.dt_proj.forward(ctx, p.slice(1, 0, r)?)?.softplus()?;
        Ok((delta, p.slice(1, r, r + n)?, p.slice(1, r + n, r + 2 * n)?))
    }

    pub fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        seq_dims("selective ssm", &x.shape())?;
        let (delta, bm, cm) = self.terms(ctx, x)?;
        x.selective_scan(delta, ctx.p(self.a), bm, cm, ctx.p(self.d_skip))
    }

    /// The resolved per-token parameters for `x`, for checking against the
    /// dense oracle.
    pub fn params<'g, T: Real>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<SsmParams<T>> {
        let (delta, bm, cm) = self.terms(ctx, x)?;
        SsmParams::selective(
            &ctx.p(self.a).value(),
            (*delta.value()).clone(),
            (*bm.value()).clone(),
            (*cm.value()).clone(),
            (*ctx.p(self.d_skip).value()).clone(),
        )
    }
}

/// Data-dependent quasiseparable mixer with diagonal transitions. One
/// projection yields both directions' `b, c`, their step sizes and the
/// per-token diagonal `δ`; the mixing matrix is shared across channels.
#[derive(Debug, Clone)]
pub struct QuasiMixer {
    pub proj: Linear,
    pub a_fwd: ParamId,
    pub a_bwd: ParamId,
    pub channels: usize,
    pub state_dim: usize,
}

type Direction<'g, T> = [Var<'g, T>; 3];

impl QuasiMixer {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, d: usize, n: usize) -> Result<Self> {
        let proj = b.linear("proj", d, 4 * n + 3, true)?;
        if let Some(id) = proj.bias {
            let mut bias = vec![0.0; 4 * n + 3];
            let dt = dt_bias_init(b, 2);
            bias[4 * n] = dt[0];
            bias[4 * n + 1] = dt[1];
            bias[4 * n + 2] = 1.0;
            b.overwrite(id, &bias)?;
        }
        let rates = Tensor::from_f64(&[n], &rate_init(n))?;
        let a_fwd = b.param("a_fwd", rates.clone())?;
        let a_bwd = b.param("a_bwd", rates)?;
        Ok(QuasiMixer {
            proj,
            a_fwd,
            a_bwd,
            channels: d,
            state_dim: n,
        })
    }

    /// Diagonal transitions, `b`, `c` for both directions and `δ (L, 1)`.
    pub fn terms<'g, T: Real>(
        &self,
        ctx: &Ctx<'g, T>,
        x: Var<'g, T>,
    ) -> Result<(Direction<'g, T>, Direction<'g, T>, Var<'g, T>)> {
        let n = self.state_dim;
        let p = self.proj.forward(ctx, x)?;
        let col = |i: usize| p.slice(1, i * n, (i + 1) * n);
        let decay = |dt_col: usize, a: ParamId| -> Result<Var<'g, T>> {
            let dt = p.slice(1, 4 * n + dt_col, 4 * n + dt_col + 1)?.softplus()?;
            let rate = ctx.p(a).softplus()?.reshape(&[1, n])?;
            dt.mul(rate)?.neg()?.exp()
        };
        let fwd = [decay(0, self.a_fwd)?, col(0)?, col(1)?];
        let bwd = [decay(1, self.a_bwd)?, col(2)?, col(3)?];
        let delta = p.slice(1, 4 * n + 2, 4 * n + 3)?;
        Ok((fwd, bwd, delta))
    }

    pub fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        seq_dims("quasiseparable mixer", &x.shape())?;
        let (fwd, bwd, delta) = self.terms(ctx, x)?;
        quasiseparable_mix(x, fwd, bwd, delta)
    }

    pub fn params<'g, T: Real>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<QuasiParams<T>> {
        let (fwd, bwd, delta) = self.terms(ctx, x)?;
        let triple = |[a, b, c]: Direction<'g, T>| {
            Triple::diagonal(&a.value(), (*b.value()).clone(), (*c.value()).clone())
        };
        let l = delta.shape()[0];
        QuasiParams::new(triple(fwd)?, triple(bwd)?, (*delta.value()).clone().reshaped(&[l])?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvMode {
    /// Kernel 4, sees only the current and earlier tokens.
    Causal,
    /// Kernel 3, centered.
    Centered,
}

impl ConvMode {
    fn kernel(self) -> usize {
        match self {
            ConvMode::Causal => 4,
            ConvMode::Centered => 3,
        }
    }
}

/// Full token-mixer block around a sequence core: input projection to
/// `2e` channels split into value and gate, short depthwise convolution
/// along the sequence, SiLU, the core mixer, SiLU-gating, output projection.
#[derive(Debug, Clone)]
pub struct GatedSeqMixer {
    pub in_proj: Linear,
    pub conv: Conv3d,
    pub mode: ConvMode,
    pub core: Box<SeqMixer>,
    pub out_proj: Linear,
    pub inner: usize,
}

impl GatedSeqMixer {
    fn new<T: Real>(
        b: &mut Builder<'_, T>,
        d: usize,
        mode: ConvMode,
        core: impl FnOnce(&mut Builder<'_, T>, usize) -> Result<SeqMixer>,
    ) -> Result<Self> {
        let e = 2 * d;
        let in_proj = b.linear("in_proj", d, 2 * e, false)?;
        let k = mode.kernel();
        let pad = if mode == ConvMode::Centered { k / 2 } else { 0 };
        let spec = Conv3dSpec {
            stride: [1; 3],
            padding: [0, 0, pad],
            groups: e,
        };
        let conv = b.conv_shaped("conv", e, e, [1, 1, k], spec)?;
        let core = Box::new(core(&mut b.scope("core"), e)?);
        let out_proj = b.linear("out_proj", e, d, false)?;
        Ok(GatedSeqMixer {
            in_proj,
            conv,
            mode,
            core,
            out_proj,
            inner: e,
        })
    }

    pub fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let (l, _) = seq_dims("gated sequence mixer", &x.shape())?;
        let e = self.inner;
        let h = self.in_proj.forward(ctx, x)?;
        let (u, z) = (h.slice(1, 0, e)?, h.slice(1, e, 2 * e)?);
        let mut u = u.permute(&[1, 0])?.reshape(&[e, 1, 1, l])?;
        if self.mode == ConvMode::Causal {
            u = u.pad_axis(3, self.mode.kernel() - 1, 0)?;
        }
        let u = self
            .conv
            .forward(ctx, u)?
            .reshape(&[e, l])?
            .permute(&[1, 0])?
            .silu()?;
        let y = self.core.forward(ctx, u)?.mul(z.silu()?)?;
        self.out_proj.forward(ctx, y)
    }
}

/// Any of the sequence mixers, as used inside tri-oriented mixing.
#[derive(Debug, Clone)]
pub enum SeqMixer {
    Ssm(SelectiveSsm),
    Quasi(QuasiMixer),
    Gated(GatedSeqMixer),
}

impl SeqMixer {
    /// Bare selective scan on `d` channels (full-rank step projection).
    pub fn ssm<T: Real>(b: &mut Builder<'_, T>, d: usize, n: usize) -> Result<Self> {
        Ok(SeqMixer::Ssm(SelectiveSsm::new(b, d, n, d)?))
    }

    /// Bare quasiseparable mixer on `d` channels.
    pub fn quasi<T: Real>(b: &mut Builder<'_, T>, d: usize, n: usize) -> Result<Self> {
        Ok(SeqMixer::Quasi(QuasiMixer::new(b, d, n)?))
    }

    /// Mamba-style block: causal convolution and a selective scan whose
    /// step projection has rank `⌈d/16⌉`.
    pub fn mamba<T: Real>(b: &mut Builder<'_, T>, d: usize, n: usize) -> Result<Self> {
        let rank = d.div_ceil(16);
        let m = GatedSeqMixer::new(b, d, ConvMode::Causal, |b, e| {
            Ok(SeqMixer::Ssm(SelectiveSsm::new(b, e, n, rank)?))
        })?;
        Ok(SeqMixer::Gated(m))
    }

    /// Hydra-style block: centered convolution and a quasiseparable mixer.
    pub fn hydra<T: Real>(b: &mut Builder<'_, T>, d: usize, n: usize) -> Result<Self> {
        let m = GatedSeqMixer::new(b, d, ConvMode::Centered, |b, e| {
            Ok(SeqMixer::Quasi(QuasiMixer::new(b, e, n)?))
        })?;
        Ok(SeqMixer::Gated(m))
    }

    pub fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        match self {
            SeqMixer::Ssm(m) => m.forward(ctx, x),
            SeqMixer::Quasi(m) => m.forward(ctx, x),
            SeqMixer::Gated(m) => m.forward(ctx, x),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::rng::Rng;
    use crate::seqmix::{apply_per_channel, dense_apply, materialize_semiseparable, quasiseparable_materialize};
    use crate::tensor::{grad_check_at, Graph};

    fn seq(rng: &mut Rng, l: usize, d: usize) -> Tensor<f64> {
        Tensor::new(&[l, d], rng.uniform_vec(l * d, -1.0, 1.0)).unwrap()
    }

    #[test]
    fn initial_rates_are_one_to_n() {
        for (k, a) in rate_init(4).into_iter().enumerate() {
            assert!((crate::tensor::softplus(a) - (k as f64 + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn ssm_layer_matches_its_oracle() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::new(3);
        let m = SelectiveSsm::new(&mut Builder::new(&mut store, &mut rng), 3, 4, 2).unwrap();
        let x = seq(&mut rng, 12, 3);
        let g = Graph::new();
        let ctx = store.bind(&g, false);
        let xv = g.constant(x.clone());
        let y = m.forward(&ctx, xv).unwrap().value();
        let p = m.params(&ctx, xv).unwrap();
        let want = apply_per_channel(&materialize_semiseparable(&p, 12).unwrap(), &x).unwrap();
        assert!(y.max_abs_diff(&want).unwrap() < 1e-10);
    }

    #[test]
    fn quasi_layer_matches_its_oracle() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::new(4);
        let m = QuasiMixer::new(&mut Builder::new(&mut store, &mut rng), 3, 2).unwrap();
        let x = seq(&mut rng, 10, 3);
        let g = Graph::new();
        let ctx = store.bind(&g, false);
        let xv = g.constant(x.clone());
        let y = m.forward(&ctx, xv).unwrap().value();
        let q = m.params(&ctx, xv).unwrap();
        let mat = quasiseparable_materialize(&q).unwrap();
        let want = dense_apply(10, 3, mat.data(), x.data());
        for (a, b) in y.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn wrapped_mixers_preserve_shape_and_differentiate() {
        for hydra in [false, true] {
            let mut store = ParamStore::<f64>::new();
            let mut rng = Rng::new(5);
            let mut b = Builder::new(&mut store, &mut rng);
            let m = if hydra { SeqMixer::hydra(&mut b, 2, 2) } else { SeqMixer::mamba(&mut b, 2, 2) }.unwrap();
            let x = seq(&mut rng, 6, 2);
            let probe = seq(&mut rng, 6, 2);
            let report = grad_check_at(
                |g, v| {
                    let ctx = store.bind(g, false);
                    m.forward(&ctx, v)?.mul(g.constant(probe.clone()))?.sum()
                },
                &x,
                1e-6,
                &(0..12).collect::<Vec<_>>(),
            )
            .unwrap();
            assert!(report.max_rel_err < 1e-6, "hydra={hydra}: {report:?}");
        }
    }
}
