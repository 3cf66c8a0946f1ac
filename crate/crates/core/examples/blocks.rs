//! The four encoder block kinds on one feature map: output shape and
//! parameter count at the first-stage width.

use volumix::blocks::{BlockKind, BlockParams, StageBlock};
use volumix::nn::{Builder, ParamStore};
use volumix::rng::Rng;
use volumix::tensor::{Graph, Tensor};

fn main() -> volumix::Result<()> {
    let ch = 48;
    let mut rng = Rng::new(0);
    let x = Tensor::new(&[ch, 8, 8, 8], rng.uniform_vec(ch * 512, -1.0, 1.0).into_iter().map(|v| v as f32).collect())?;
    for kind in BlockKind::ALL {
        let mut store = ParamStore::<f32>::new();
        let block = StageBlock::new(&mut Builder::new(&mut store, &mut Rng::new(0)), kind, ch, BlockParams::default())?;
        let g = Graph::new();
        let y = block.forward(&store.bind(&g, false), g.constant(x.clone()))?;
        let v = y.value();
        let rms = (v.data().iter().map(|a| a * a).sum::<f32>() / v.numel() as f32).sqrt();
        println!("{:<10} params {:>8}  out {:?}  rms {rms:.3}", kind.name(), store.num_scalars(), v.shape());
    }
    Ok(())
}
