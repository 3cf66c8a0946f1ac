use crate::error::{invalid, Result};
use crate::nn::{Builder, Ctx, Linear};
use crate::tensor::{Real, Tensor, Var};

/// Multi-head self-attention inside non-overlapping cubic windows, with an
/// optional cyclic shift by half a window. Extents smaller than the window
/// shrink the window on that axis; extents not divisible by it are padded
/// and the padded keys masked out.
#[derive(Debug, Clone)]
pub struct WindowAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub channels: usize,
    pub window: usize,
    pub heads: usize,
    pub shifted: bool,
}

const MASKED: f64 = -1e9;

impl WindowAttention {
    pub fn new<T: Real>(
        b: &mut Builder<'_, T>,
        channels: usize,
        window: usize,
        heads: usize,
        shifted: bool,
    ) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(invalid!("window attention: {heads} heads do not divide {channels} channels"));
        }
        if window == 0 {
            return Err(invalid!("window attention: window must be positive"));
        }
        Ok(WindowAttention {
            qkv: b.linear("qkv", channels, 3 * channels, true)?,
            proj: b.linear("proj", channels, channels, true)?,
            channels,
            window,
            heads,
            shifted,
        })
    }

    pub fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        Ok(self.run(ctx, x)?.0)
    }

    /// Attention probabilities `(windows · heads, T, T)` for `x`.
    pub fn weights<'g, T: Real>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Tensor<T>> {
        Ok((*self.run(ctx, x)?.1.value()).clone())
    }

    fn run<'g, T: Real>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let s = x.shape();
        if s.len() != 4 || s[0] != self.channels {
            return Err(invalid!("window attention: expected ({}, D, H, W), got {s:?}", self.channels));
        }
        let c = self.channels;
        let dims = [s[1], s[2], s[3]];
        let win: [usize; 3] = dims.map(|d| self.window.min(d));
        let padded: [usize; 3] = std::array::from_fn(|a| dims[a].div_ceil(win[a]) * win[a]);
        let counts: [usize; 3] = std::array::from_fn(|a| padded[a] / win[a]);
        let shifts: [isize; 3] = std::array::from_fn(|a| {
            if self.shifted && counts[a] > 1 {
                (win[a] / 2) as isize
            } else {
                0
            }
        });
        let needs_mask = padded != dims;

        // Shared layout transform: (D, H, W, k) → (windows, T, k).
        let to_windows = |mut t: Var<'g, T>| -> Result<Var<'g, T>> {
            let k = t.shape()[3];
            for a in 0..3 {
                if padded[a] > dims[a] {
                    t = t.pad_axis(a, 0, padded[a] - dims[a])?;
                }
                if shifts[a] != 0 {
                    t = t.roll(a, -shifts[a])?;
                }
            }
            t.reshape(&[counts[0], win[0], counts[1], win[1], counts[2], win[2], k])?
                .permute(&[0, 2, 4, 1, 3, 5, 6])?
                .reshape(&[counts.iter().product(), win.iter().product(), k])
        };

        let g = ctx.graph();
        let tokens = to_windows(x.permute(&[1, 2, 3, 0])?)?;
        let (nwin, t) = (counts.iter().product::<usize>(), win.iter().product::<usize>());
        let (h, hd) = (self.heads, c / self.heads);
        let qkv = self.qkv.forward(ctx, tokens)?;
        let split = |i: usize| -> Result<Var<'g, T>> {
            qkv.slice(2, i * c, (i + 1) * c)?
                .reshape(&[nwin, t, h, hd])?
                .permute(&[0, 2, 1, 3])?
                .reshape(&[nwin * h, t, hd])
        };
        let (q, k, v) = (split(0)?, split(1)?, split(2)?);
        let mut scores = q
            .matmul(k.permute(&[0, 2, 1])?)?
            .scale(T::one() / T::lit(hd as f64).sqrt())?;
        if needs_mask {
            let valid = Tensor::full(&[dims[0], dims[1], dims[2], 1], T::one());
            let valid = to_windows(g.constant(valid))?.value();
            let bias: Vec<T> = valid
                .data()
                .iter()
                .map(|&v| if v > T::zero() { T::zero() } else { T::lit(MASKED) })
                .collect();
            let bias = g.constant(Tensor::new(&[nwin, 1, 1, t], bias)?);
            scores = scores
                .reshape(&[nwin, h, t, t])?
                .add(bias)?
                .reshape(&[nwin * h, t, t])?;
        }
        let attn = scores.softmax(2)?;
        let out = attn
            .matmul(v)?
            .reshape(&[nwin, h, t, hd])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[nwin, t, c])?;
        let mut out = self
            .proj
            .forward(ctx, out)?
            .reshape(&[counts[0], counts[1], counts[2], win[0], win[1], win[2], c])?
            .permute(&[0, 3, 1, 4, 2, 5, 6])?
            .reshape(&[padded[0], padded[1], padded[2], c])?;
        for a in 0..3 {
            if shifts[a] != 0 {
                out = out.roll(a, shifts[a])?;
            }
            if padded[a] > dims[a] {
                out = out.slice(a, 0, dims[a])?;
            }
        }
        Ok((out.permute(&[3, 0, 1, 2])?, attn))
    }
}
