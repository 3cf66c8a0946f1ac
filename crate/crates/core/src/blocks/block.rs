use std::fmt;
use std::str::FromStr;

use super::{Gsc, TriOrientedMix, WindowAttention};
use crate::error::{invalid, Error, Result};
use crate::nn::{Builder, Conv3d, Ctx, Norm, NormKind};
use crate::seqmix::{gated_cnn_mix, SeqMixer};
use crate::tensor::{Conv3dSpec, Real, Var};

/// Encoder block family; one kind per model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockKind {
    TsMamba,
    TsHydra,
    MambaSwin,
    MambaOut,
}

impl BlockKind {
    pub const ALL: [BlockKind; 4] = [
        BlockKind::TsMamba,
        BlockKind::TsHydra,
        BlockKind::MambaSwin,
        BlockKind::MambaOut,
    ];

    /// Command-line name.
    pub fn name(self) -> &'static str {
        match self {
            BlockKind::TsMamba => "tsmamba",
            BlockKind::TsHydra => "tshydra",
            BlockKind::MambaSwin => "mamba_swin",
            BlockKind::MambaOut => "mambaout",
        }
    }

    /// Name of the full segmentation network built from this block.
    pub fn model_name(self) -> &'static str {
        match self {
            BlockKind::TsMamba => "SegMamba",
            BlockKind::TsHydra => "SegHydra",
            BlockKind::MambaSwin => "MambaSwinUNet",
            BlockKind::MambaOut => "MambaOutUNet",
        }
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_ascii_lowercase();
        let s = match s.as_str() {
            // Alternative names used for the hybrid.
            "mambaswin" | "mamba-swin" | "vismix" => "mamba_swin",
            other => other,
        };
        BlockKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| invalid!("unknown variant {s:?} (expected tsmamba, tshydra, mamba_swin or mambaout)"))
    }
}

/// Channel MLP as two pointwise convolutions with expansion 2 and SiLU.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Conv3d,
    pub fc2: Conv3d,
}

impl Mlp {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, ch: usize) -> Result<Self> {
        Ok(Mlp {
            fc1: b.conv("fc1", ch, 2 * ch, 1, Conv3dSpec::default())?,
            fc2: b.conv("fc2", 2 * ch, ch, 1, Conv3dSpec::default())?,
        })
    }

    pub fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let h = self.fc1.forward(ctx, x)?.silu()?;
        self.fc2.forward(ctx, h)
    }
}

/// Gated CNN token mixer: pointwise projection to `2C` split into gate and
/// value, depthwise 7³ convolution of the value, `SiLU(gate) ⊙ value`,
/// pointwise projection back to `C`.
#[derive(Debug, Clone)]
pub struct GatedCnn {
    pub fc1: Conv3d,
    pub dwconv: Conv3d,
    pub fc2: Conv3d,
    pub channels: usize,
}

impl GatedCnn {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, ch: usize) -> Result<Self> {
        Ok(GatedCnn {
            fc1: b.conv("fc1", ch, 2 * ch, 1, Conv3dSpec::default())?,
            dwconv: b.conv("dwconv", ch, ch, 7, Conv3dSpec::new(1, 3).with_groups(ch))?,
            fc2: b.conv("fc2", ch, ch, 1, Conv3dSpec::default())?,
            channels: ch,
        })
    }

    pub fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let c = self.channels;
        let h = self.fc1.forward(ctx, x)?;
        let (gate, value) = (h.slice(0, 0, c)?, h.slice(0, c, 2 * c)?);
        let mixed = gated_cnn_mix(
            value,
            ctx.p(self.dwconv.weight),
            self.dwconv.bias.map(|b| ctx.p(b)),
        )?;
        self.fc2.forward(ctx, gate.silu()?.mul(mixed)?)
    }
}

/// `x + Swin(LN(ToM(LN(x))))`: Mamba token mixing followed by windowed
/// attention, with one residual around both.
#[derive(Debug, Clone)]
pub struct MambaSwin {
    pub norm_in: Norm,
    pub tom: TriOrientedMix,
    pub norm_mid: Norm,
    pub attn: WindowAttention,
}

impl MambaSwin {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, ch: usize, state_dim: usize, window: usize, heads: usize, shifted: bool) -> Result<Self> {
        Ok(MambaSwin {
            norm_in: b.norm("norm_in", ch, NormKind::Channel)?,
            tom: TriOrientedMix::new(&mut b.scope("tom"), |b| SeqMixer::mamba(b, ch, state_dim))?,
            norm_mid: b.norm("norm_mid", ch, NormKind::Channel)?,
            attn: WindowAttention::new(&mut b.scope("attn"), ch, window, heads, shifted)?,
        })
    }

    pub fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let m = self.tom.forward(ctx, self.norm_in.forward(ctx, x)?)?;
        let a = self.attn.forward(ctx, self.norm_mid.forward(ctx, m)?)?;
        x.add(a)
    }
}

/// The token-mixing stage of a block.
#[derive(Debug, Clone)]
pub enum TokenMixer {
    /// `ToM(LN(x))`, residual added by the block.
    Tom { norm: Norm, tom: TriOrientedMix },
    /// `GatedCNN(LN(x))`, residual added by the block.
    Gated { norm: Norm, gated: GatedCnn },
    /// Carries its own residual.
    Swin(MambaSwin),
}

/// Architecture knobs a block needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockParams {
    pub state_dim: usize,
    pub window: usize,
    pub heads: usize,
    /// Whether windowed attention uses the shifted partition.
    pub shifted: bool,
}

impl Default for BlockParams {
    fn default() -> Self {
        BlockParams {
            state_dim: 4,
            window: 4,
            heads: 4,
            shifted: false,
        }
    }
}

/// One encoder block: `x̂ = GSC(x)`, `x̃ = mix(x̂)` (with residual),
/// `out = MLP(LN(x̃)) + x̃`.
#[derive(Debug, Clone)]
pub struct StageBlock {
    pub kind: BlockKind,
    pub gsc: Gsc,
    pub mixer: TokenMixer,
    pub norm_mlp: Norm,
    pub mlp: Mlp,
    pub channels: usize,
}

impl StageBlock {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, kind: BlockKind, ch: usize, p: BlockParams) -> Result<Self> {
        let gsc = Gsc::new(&mut b.scope("gsc"), ch)?;
        let mixer = match kind {
            BlockKind::TsMamba | BlockKind::TsHydra => {
                let norm = b.norm("norm1", ch, NormKind::Channel)?;
                let tom = TriOrientedMix::new(&mut b.scope("tom"), |b| {
                    if kind == BlockKind::TsMamba {
                        SeqMixer::mamba(b, ch, p.state_dim)
                    } else {
                        SeqMixer::hydra(b, ch, p.state_dim)
                    }
                })?;
                TokenMixer::Tom { norm, tom }
            }
            BlockKind::MambaOut => TokenMixer::Gated {
                norm: b.norm("norm1", ch, NormKind::Channel)?,
                gated: GatedCnn::new(&mut b.scope("gated_cnn"), ch)?,
            },
            BlockKind::MambaSwin => {
                TokenMixer::Swin(MambaSwin::new(&mut b.scope("mamba_swin"), ch, p.state_dim, p.window, p.heads, p.shifted)?)
            }
        };
        Ok(StageBlock {
            kind,
            gsc,
            mixer,
            norm_mlp: b.norm("norm2", ch, NormKind::Channel)?,
            mlp: Mlp::new(&mut b.scope("mlp"), ch)?,
            channels: ch,
        })
    }

    pub fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let xh = self.gsc.forward(ctx, x)?;
        let xt = match &self.mixer {
            TokenMixer::Tom { norm, tom } => tom.forward(ctx, norm.forward(ctx, xh)?)?.add(xh)?,
            TokenMixer::Gated { norm, gated } => gated.forward(ctx, norm.forward(ctx, xh)?)?.add(xh)?,
            TokenMixer::Swin(ms) => ms.forward(ctx, xh)?,
        };
        let m = self.mlp.forward(ctx, self.norm_mlp.forward(ctx, xt)?)?;
        m.add(xt)
    }
}
