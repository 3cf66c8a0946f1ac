use crate::error::{invalid, Result};
use crate::nn::{Builder, Ctx};
use crate::seqmix::SeqMixer;
use crate::tensor::{Real, Var};

/// One of the three flattening orders of a `(C, D, H, W)` map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    /// D-major: tokens ordered by (D, H, W).
    Axial,
    /// H-major: (H, D, W).
    Coronal,
    /// W-major: (W, D, H).
    Sagittal,
}

impl Orientation {
    pub const ALL: [Orientation; 3] = [Orientation::Axial, Orientation::Coronal, Orientation::Sagittal];

    pub fn name(self) -> &'static str {
        match self {
            Orientation::Axial => "axial",
            Orientation::Coronal => "coronal",
            Orientation::Sagittal => "sagittal",
        }
    }

    /// Spatial axes (0 = D, 1 = H, 2 = W) from slowest to fastest.
    pub fn order(self) -> [usize; 3] {
        match self {
            Orientation::Axial => [0, 1, 2],
            Orientation::Coronal => [1, 0, 2],
            Orientation::Sagittal => [2, 0, 1],
        }
    }

    fn perm(self) -> [usize; 4] {
        let [a, b, c] = self.order();
        [a + 1, b + 1, c + 1, 0]
    }
}

/// `(C, D, H, W)` → `(L, C)` token sequence in the given order.
pub fn flatten<'g, T: Real>(x: Var<'g, T>, o: Orientation) -> Result<Var<'g, T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(invalid!("flatten: expected (C, D, H, W), got {s:?}"));
    }
    x.permute(&o.perm())?.reshape(&[s[1] * s[2] * s[3], s[0]])
}

/// Inverse of [`flatten`] for a map of spatial extents `dims`.
pub fn unflatten<'g, T: Real>(seq: Var<'g, T>, o: Orientation, dims: [usize; 3]) -> Result<Var<'g, T>> {
    let c = seq.shape()[1];
    let [a, b, d] = o.order();
    let perm = o.perm();
    let mut inverse = [0; 4];
    for (i, &p) in perm.iter().enumerate() {
        inverse[p] = i;
    }
    seq.reshape(&[dims[a], dims[b], dims[d], c])?.permute(&inverse)
}

/// Sum of three sequence mixes over the axial, coronal and sagittal
/// flattenings, each with its own parameters.
#[derive(Debug, Clone)]
pub struct TriOrientedMix {
    pub mixers: [SeqMixer; 3],
}

impl TriOrientedMix {
    /// Builds one mixer per orientation under `axial`, `coronal`, `sagittal`.
    pub fn new<T: Real>(
        b: &mut Builder<'_, T>,
        mut make: impl FnMut(&mut Builder<'_, T>) -> Result<SeqMixer>,
    ) -> Result<Self> {
        let axial = make(&mut b.scope("axial"))?;
        let coronal = make(&mut b.scope("coronal"))?;
        let sagittal = make(&mut b.scope("sagittal"))?;
        Ok(TriOrientedMix {
            mixers: [axial, coronal, sagittal],
        })
    }

    pub fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let s = x.shape();
        let dims = [s[1], s[2], s[3]];
        let mut total: Option<Var<'g, T>> = None;
        for (o, mixer) in Orientation::ALL.into_iter().zip(&self.mixers) {
            let y = unflatten(mixer.forward(ctx, flatten(x, o)?)?, o, dims)?;
            total = Some(match total {
                Some(t) => t.add(y)?,
                None => y,
            });
        }
        Ok(total.expect("three orientations"))
    }
}
