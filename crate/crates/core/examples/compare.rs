//! All four variants under one short schedule on a small dataset, printed
//! as the comparison table.

use volumix::blocks::BlockKind;
use volumix::segnet::SegConfig;
use volumix::synthdata::{generate_dataset, PhantomSpec};
use volumix::trainer::{compare_variants, comparison_table, TrainConfig};

fn main() -> volumix::Result<()> {
    let dir = std::env::temp_dir().join("volumix_compare");
    let manifest = generate_dataset(&PhantomSpec::small_roi(0), 4, 1, 2, &dir)?;
    let cfg = TrainConfig {
        epochs: 3,
        val_interval: 3,
        ..TrainConfig::default()
    };
    let base = SegConfig::default().with_width(8);
    let results = compare_variants(&cfg, &base, &BlockKind::ALL, &manifest, None, |kind, e| {
        println!("{kind} epoch {} loss {:.4}", e.epoch, e.train_loss);
    })?;
    print!("{}", comparison_table(&results));
    Ok(())
}
