//! Full-width networks for every variant: parameter counts and one forward
//! pass on a 32³ volume.

use std::time::Instant;

use volumix::blocks::BlockKind;
use volumix::segnet::{build_model, SegConfig};
use volumix::synthdata::{gen_phantom, PhantomSpec};

fn main() -> volumix::Result<()> {
    let (image, _) = gen_phantom(&PhantomSpec::small_roi(0))?;
    let x = image.to_tensor()?;
    for kind in BlockKind::ALL {
        let model = build_model::<f32>(&SegConfig::new(kind), 0)?;
        let start = Instant::now();
        let logits = model.predict_logits(&x)?;
        println!(
            "{:<14} params {:>10}  logits {:?}  forward {:.2}s",
            kind.model_name(),
            model.param_count(),
            logits.shape(),
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
