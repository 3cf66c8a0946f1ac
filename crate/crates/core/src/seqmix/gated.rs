use crate::error::{Error, Result};
use crate::tensor::{Conv3dSpec, Real, Var};

/// Convolution-only token mixer: a depthwise 7³ convolution (padding 3) of a
/// `(C, D, H, W)` map. `weight` is `(C, 1, 7, 7, 7)`, `bias` is `(C,)`.
pub fn gated_cnn_mix<'g, T: Real>(
    x: Var<'g, T>,
    weight: Var<'g, T>,
    bias: Option<Var<'g, T>>,
) -> Result<Var<'g, T>> {
    let (xs, ws) = (x.shape(), weight.shape());
    let c = xs.first().copied().unwrap_or(0);
    if xs.len() != 4 || ws != [c, 1, 7, 7, 7] {
        return Err(Error::shape("gated_cnn_mix", &xs, &ws));
    }
    x.conv3d(weight, bias, Conv3dSpec::new(1, 3).with_groups(c))
}
