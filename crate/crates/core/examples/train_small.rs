//! A short training run at reduced width, then checkpoint reload and test
//! evaluation.
//!
//! `cargo run --release --example train_small -- [epochs]`

use volumix::blocks::BlockKind;
use volumix::segnet::SegConfig;
use volumix::synthdata::{generate_dataset, load_split, PhantomSpec, Split};
use volumix::trainer::{evaluate, load_model, mean_dsc, train, TrainConfig, TrainPaths};

fn main() -> volumix::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(10);
    let dir = std::env::temp_dir().join("volumix_train_small");
    let manifest = generate_dataset(&PhantomSpec::small_roi(0), 8, 2, 2, &dir.join("data"))?;
    let cfg = TrainConfig {
        epochs,
        val_interval: 2,
        ..TrainConfig::default()
    };
    let seg = SegConfig::new(BlockKind::MambaOut).with_width(12);
    let paths = TrainPaths {
        checkpoint: Some(dir.join("best.ckpt")),
        log: Some(dir.join("log.csv")),
    };
    let out = train::<f32>(&cfg, &seg, &manifest, &paths, |e| println!("{}", e.to_csv()))?;
    println!("best epoch {} with val DSC {:.4} in {:.1}s", out.best_epoch, out.best_val_dsc, out.seconds);

    let reloaded = load_model::<f32>(&seg, &dir.join("best.ckpt"))?;
    let val = load_split(&manifest, Split::Val)?;
    println!("reloaded checkpoint val DSC {:.4}", mean_dsc(&reloaded, &val)?);
    let (_, report) = evaluate(&reloaded, &load_split(&manifest, Split::Test)?, None)?;
    println!("test DSC {:.4}  mIoU {:.4}  NSD {:.4}", report.mean_dsc, report.mean_miou, report.mean_nsd);
    Ok(())
}
