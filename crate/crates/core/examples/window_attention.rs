//! Windowed 3D attention: every query's weights form a distribution, and
//! shifting the windows changes which voxels attend to each other.

use volumix::blocks::WindowAttention;
use volumix::nn::{Builder, ParamStore};
use volumix::rng::Rng;
use volumix::tensor::{Graph, Tensor};

fn main() -> volumix::Result<()> {
    let (c, side) = (8, 8);
    let mut rng = Rng::new(3);
    let x = Tensor::new(&[c, side, side, side], rng.uniform_vec(c * side * side * side, -1.0, 1.0))?;
    for shifted in [false, true] {
        let mut store = ParamStore::<f64>::new();
        let attn = WindowAttention::new(&mut Builder::new(&mut store, &mut Rng::new(0)), c, 4, 2, shifted)?;
        let g = Graph::new();
        let ctx = store.bind(&g, false);
        let w = attn.weights(&ctx, g.constant(x.clone()))?;
        let n = *w.shape().last().unwrap();
        let worst = w.data().chunks(n).map(|row| (row.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
        let y = attn.forward(&ctx, g.constant(x.clone()))?;
        println!("shifted={shifted}: weights {:?}, max |row sum - 1| = {worst:.1e}, out {:?}", w.shape(), y.shape());
    }
    Ok(())
}
