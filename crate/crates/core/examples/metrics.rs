//! Dice, IoU and surface Dice for two overlapping cubes, with the surface
//! tolerance swept.

use volumix::metrics::{dsc, miou, nsd, LabelVolume, MetricsReport};

fn cube(origin: [usize; 3], side: usize) -> volumix::Result<LabelVolume> {
    let n = 16;
    let mut labels = vec![0u8; n * n * n];
    for z in origin[0]..origin[0] + side {
        for y in origin[1]..origin[1] + side {
            for x in origin[2]..origin[2] + side {
                labels[(z * n + y) * n + x] = 1;
            }
        }
    }
    LabelVolume::new([n; 3], labels, [2.0, 1.0, 1.0])
}

fn main() -> volumix::Result<()> {
    let gt = cube([4, 4, 4], 6)?;
    let pred = cube([5, 4, 6], 6)?;
    let (d, i) = (dsc(&pred, &gt, 1)?, miou(&pred, &gt, 1)?);
    println!("DSC {d:.4}  IoU {i:.4}  2·IoU/(1+IoU) {:.4}", 2.0 * i / (1.0 + i));
    for tau in [0.5, 1.0, 2.0, 3.0] {
        println!("NSD at {tau} mm: {:.4}", nsd(&pred, &gt, 1, tau)?);
    }
    let report = MetricsReport::compute(&pred, &gt, 2, None)?;
    print!("{}\n{}", MetricsReport::CSV_HEADER, report.to_csv_rows("shifted_cube"));
    Ok(())
}
