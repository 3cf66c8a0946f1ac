//! Synthetic phantoms in both regimes: foreground fractions per class and
//! a round trip through the volume file format.

use volumix::synthdata::{gen_phantom, PhantomSpec, Volume};

fn main() -> volumix::Result<()> {
    for spec in [PhantomSpec::small_roi(7), PhantomSpec::multi_organ(7)] {
        let (image, labels) = gen_phantom(&spec)?;
        let lv = labels.to_labels()?;
        let total = lv.labels.len() as f64;
        let fractions: Vec<String> = (1..spec.num_classes as u8)
            .map(|c| format!("{:.4}", lv.labels.iter().filter(|&&l| l == c).count() as f64 / total))
            .collect();
        let t = image.to_tensor()?;
        let mean = t.data().iter().sum::<f32>() / t.numel() as f32;
        println!(
            "{:<11} dims {:?} spacing {:?} image mean {mean:.3}  class fractions [{}]",
            spec.regime.name(),
            image.dims,
            image.spacing,
            fractions.join(", ")
        );
        let back = Volume::from_bytes(&image.to_bytes())?;
        assert_eq!(back, image);
    }
    println!("volume files round-trip exactly");
    Ok(())
}
