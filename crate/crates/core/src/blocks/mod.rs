//! Composite 3D blocks built on the sequence mixers: gated spatial
//! convolution, tri-oriented mixing, windowed attention and the encoder
//! block flavours.

mod attention;
mod block;
mod gsc;
mod tom;

pub use attention::WindowAttention;
pub use block::{BlockKind, BlockParams, GatedCnn, MambaSwin, Mlp, StageBlock, TokenMixer};
pub use gsc::{ConvBlock, Gsc};
pub use tom::{flatten, unflatten, Orientation, TriOrientedMix};
