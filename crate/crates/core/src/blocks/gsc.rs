use crate::error::{Error, Result};
use crate::nn::{Builder, Conv3d, Ctx, Norm, NormKind};
use crate::tensor::{Conv3dSpec, Real, Var};

/// Instance norm → convolution → SiLU.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub norm: Norm,
    pub conv: Conv3d,
}

impl ConvBlock {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, norm: &str, conv: &str, ch: usize, kernel: usize) -> Result<Self> {
        Ok(ConvBlock {
            norm: b.norm(norm, ch, NormKind::Instance)?,
            conv: b.conv(conv, ch, ch, kernel, Conv3dSpec::new(1, kernel / 2))?,
        })
    }

    pub fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let y = self.norm.forward(ctx, x)?;
        self.conv.forward(ctx, y)?.silu()
    }
}

/// Gated spatial convolution: `x + C₃(C₃(x) ⊙ C₁(x))`.
#[derive(Debug, Clone)]
pub struct Gsc {
    pub branch3: ConvBlock,
    pub branch1: ConvBlock,
    pub outer: ConvBlock,
    pub channels: usize,
}

impl Gsc {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, ch: usize) -> Result<Self> {
        Ok(Gsc {
            branch3: ConvBlock::new(b, "norm1", "conv1", ch, 3)?,
            branch1: ConvBlock::new(b, "norm2", "conv2", ch, 1)?,
            outer: ConvBlock::new(b, "norm3", "conv3", ch, 3)?,
            channels: ch,
        })
    }

    pub fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[0] != self.channels {
            return Err(Error::shape("gsc", &shape, &[self.channels]));
        }
        let gated = self.branch3.forward(ctx, x)?.mul(self.branch1.forward(ctx, x)?)?;
        x.add(self.outer.forward(ctx, gated)?)
    }
}
