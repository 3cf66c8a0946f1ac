//! Overlap and surface metrics over integer label volumes.
//!
//! Conventions: a class absent from both volumes scores 1 on every metric;
//! a class present in exactly one scores 0. Surface distances are exact
//! (brute force over surface voxel pairs), in millimetres.

use std::fmt::Write as _;

use crate::error::{invalid, Error, Result};

/// `(D, H, W)` labels with per-axis voxel spacing `(sz, sy, sx)` in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub dims: [usize; 3],
    pub labels: Vec<u8>,
    pub spacing: [f64; 3],
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], labels: Vec<u8>, spacing: [f64; 3]) -> Result<Self> {
        if labels.len() != dims.iter().product::<usize>() {
            return Err(invalid!("{} labels for a {dims:?} volume", labels.len()));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(invalid!("voxel spacing must be positive, got {spacing:?}"));
        }
        Ok(LabelVolume { dims, labels, spacing })
    }

    /// Unit-spacing volume.
    pub fn unit(dims: [usize; 3], labels: Vec<u8>) -> Result<Self> {
        Self::new(dims, labels, [1.0; 3])
    }

    fn mask(&self, class: u8) -> Vec<bool> {
        self.labels.iter().map(|&l| l == class).collect()
    }

    /// Copy with axes reordered so that new axis `i` is old axis `perm[i]`.
    pub fn permuted(&self, perm: [usize; 3]) -> LabelVolume {
        let d = self.dims;
        let nd = perm.map(|p| d[p]);
        let mut labels = vec![0; self.labels.len()];
        for z in 0..d[0] {
            for y in 0..d[1] {
                for x in 0..d[2] {
                    let old = [z, y, x];
                    let n = perm.map(|p| old[p]);
                    labels[(n[0] * nd[1] + n[1]) * nd[2] + n[2]] = self.labels[(z * d[1] + y) * d[2] + x];
                }
            }
        }
        LabelVolume {
            dims: nd,
            labels,
            spacing: perm.map(|p| self.spacing[p]),
        }
    }
}

fn check_pair(pred: &LabelVolume, gt: &LabelVolume) -> Result<()> {
    if pred.dims != gt.dims {
        return Err(Error::shape("metrics", &pred.dims, &gt.dims));
    }
    Ok(())
}

struct Overlap {
    pred: usize,
    gt: usize,
    both: usize,
}

fn overlap(pred: &LabelVolume, gt: &LabelVolume, class: u8) -> Result<Overlap> {
    check_pair(pred, gt)?;
    let mut o = Overlap { pred: 0, gt: 0, both: 0 };
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        let (p, g) = (p == class, g == class);
        o.pred += p as usize;
        o.gt += g as usize;
        o.both += (p && g) as usize;
    }
    Ok(o)
}

/// Dice coefficient `2|P∩G| / (|P|+|G|)` of `class`.
pub fn dsc(pred: &LabelVolume, gt: &LabelVolume, class: u8) -> Result<f64> {
    let o = overlap(pred, gt, class)?;
    Ok(match (o.pred, o.gt) {
        (0, 0) => 1.0,
        (p, g) => 2.0 * o.both as f64 / (p + g) as f64,
    })
}

/// Intersection over union `|P∩G| / |P∪G|` of `class`.
pub fn miou(pred: &LabelVolume, gt: &LabelVolume, class: u8) -> Result<f64> {
    let o = overlap(pred, gt, class)?;
    Ok(match (o.pred, o.gt) {
        (0, 0) => 1.0,
        (p, g) => o.both as f64 / (p + g - o.both) as f64,
    })
}

/// Foreground voxels with at least one 6-neighbour outside the mask; the
/// volume border counts as outside. Returned as physical coordinates.
pub fn surface_points(mask: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Vec<[f64; 3]> {
    let [nd, nh, nw] = dims;
    let at = |z: usize, y: usize, x: usize| mask[(z * nh + y) * nw + x];
    let mut out = Vec::new();
    for z in 0..nd {
        for y in 0..nh {
            for x in 0..nw {
                if !at(z, y, x) {
                    continue;
                }
                let border = z == 0 || y == 0 || x == 0 || z + 1 == nd || y + 1 == nh || x + 1 == nw;
                let exposed = border
                    || !at(z - 1, y, x)
                    || !at(z + 1, y, x)
                    || !at(z, y - 1, x)
                    || !at(z, y + 1, x)
                    || !at(z, y, x - 1)
                    || !at(z, y, x + 1);
                if exposed {
                    out.push([z as f64 * spacing[0], y as f64 * spacing[1], x as f64 * spacing[2]]);
                }
            }
        }
    }
    out
}

/// Number of points of `from` within `tau` of some point of `to`.
fn within(from: &[[f64; 3]], to: &[[f64; 3]], tau: f64) -> usize {
    let t2 = tau * tau;
    from.iter()
        .filter(|p| {
            to.iter().any(|q| {
                let (a, b, c) = (p[0] - q[0], p[1] - q[1], p[2] - q[2]);
                a * a + b * b + c * c <= t2
            })
        })
        .count()
}

/// Normalized surface Dice of `class` at tolerance `tau` mm. Uses the
/// spacing of `gt`.
pub fn nsd(pred: &LabelVolume, gt: &LabelVolume, class: u8, tau: f64) -> Result<f64> {
    check_pair(pred, gt)?;
    if !(tau > 0.0) {
        return Err(invalid!("surface tolerance must be positive, got {tau}"));
    }
    let sp = surface_points(&pred.mask(class), pred.dims, gt.spacing);
    let sg = surface_points(&gt.mask(class), gt.dims, gt.spacing);
    Ok(match (sp.len(), sg.len()) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        (p, g) => (within(&sp, &sg, tau) + within(&sg, &sp, tau)) as f64 / (p + g) as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub class: u8,
    pub dsc: f64,
    pub miou: f64,
    pub nsd: f64,
}

/// Per-class metrics for one prediction (or an average over several), with
/// the foreground mean.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// Every class, background included.
    pub classes: Vec<ClassMetrics>,
    pub mean_dsc: f64,
    pub mean_miou: f64,
    pub mean_nsd: f64,
    pub n_voxels: usize,
    pub tau_mm: f64,
}

impl MetricsReport {
    /// Scores every class in `0..num_classes`. `tau` defaults to the largest
    /// voxel spacing.
    pub fn compute(pred: &LabelVolume, gt: &LabelVolume, num_classes: usize, tau: Option<f64>) -> Result<Self> {
        check_pair(pred, gt)?;
        if !(2..=255).contains(&num_classes) {
            return Err(invalid!("need between 2 and 255 classes, got {num_classes}"));
        }
        if let Some(&bad) = pred.labels.iter().chain(&gt.labels).find(|&&l| l as usize >= num_classes) {
            return Err(invalid!("label {bad} out of range for {num_classes} classes"));
        }
        let tau = tau.unwrap_or_else(|| gt.spacing.iter().cloned().fold(0.0, f64::max));
        let classes = (0..num_classes as u8)
            .map(|c| {
                Ok(ClassMetrics {
                    class: c,
                    dsc: dsc(pred, gt, c)?,
                    miou: miou(pred, gt, c)?,
                    nsd: nsd(pred, gt, c, tau)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::assemble(classes, pred.labels.len(), tau))
    }

    fn assemble(classes: Vec<ClassMetrics>, n_voxels: usize, tau_mm: f64) -> Self {
        let fg = &classes[1..];
        let mean = |f: fn(&ClassMetrics) -> f64| fg.iter().map(f).sum::<f64>() / fg.len() as f64;
        MetricsReport {
            mean_dsc: mean(|c| c.dsc),
            mean_miou: mean(|c| c.miou),
            mean_nsd: mean(|c| c.nsd),
            classes,
            n_voxels,
            tau_mm,
        }
    }

    /// Per-class average over several volumes' reports.
    pub fn average(reports: &[MetricsReport]) -> Result<Self> {
        let first = reports.first().ok_or_else(|| invalid!("no reports to average"))?;
        let n = reports.len() as f64;
        let classes = (0..first.classes.len())
            .map(|i| {
                let avg = |f: fn(&ClassMetrics) -> f64| reports.iter().map(|r| f(&r.classes[i])).sum::<f64>() / n;
                ClassMetrics {
                    class: first.classes[i].class,
                    dsc: avg(|c| c.dsc),
                    miou: avg(|c| c.miou),
                    nsd: avg(|c| c.nsd),
                }
            })
            .collect();
        let voxels = reports.iter().map(|r| r.n_voxels).sum();
        Ok(Self::assemble(classes, voxels, first.tau_mm))
    }

    pub const CSV_HEADER: &'static str = "variant,class,dsc,miou,nsd,tau_mm";

    /// One row per class plus a `mean` row of the foreground classes.
    pub fn to_csv_rows(&self, variant: &str) -> String {
        let mut s = String::new();
        for c in &self.classes {
            let _ = writeln!(s, "{variant},{},{:.6},{:.6},{:.6},{}", c.class, c.dsc, c.miou, c.nsd, self.tau_mm);
        }
        let _ = writeln!(
            s,
            "{variant},mean,{:.6},{:.6},{:.6},{}",
            self.mean_dsc, self.mean_miou, self.mean_nsd, self.tau_mm
        );
        s
    }
}

/// One line of the comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub model: String,
    pub dsc: f64,
    pub miou: f64,
    pub nsd: f64,
    pub params: Option<usize>,
    pub seconds: Option<f64>,
}

impl TableRow {
    pub const CSV_HEADER: &'static str = "model,dsc,miou,nsd,params,seconds";

    pub fn to_csv(&self) -> String {
        let params = self.params.map_or_else(String::new, |p| p.to_string());
        let secs = self.seconds.map_or_else(String::new, |t| format!("{t:.3}"));
        format!("{},{:.6},{:.6},{:.6},{params},{secs}", self.model, self.dsc, self.miou, self.nsd)
    }

    /// Parses a line written by [`TableRow::to_csv`]; empty params and
    /// seconds fields are absent.
    pub fn from_csv(line: &str) -> Result<Self> {
        let bad = || Error::Format {
            kind: "table row",
            detail: line.to_string(),
        };
        let f: Vec<&str> = line.trim().split(',').collect();
        let [model, dsc, miou, nsd, params, seconds] = f[..] else {
            return Err(bad());
        };
        let metric = |v: &str| v.parse::<f64>().map_err(|_| bad());
        Ok(TableRow {
            model: model.to_string(),
            dsc: metric(dsc)?,
            miou: metric(miou)?,
            nsd: metric(nsd)?,
            params: if params.is_empty() { None } else { Some(params.parse().map_err(|_| bad())?) },
            seconds: if seconds.is_empty() { None } else { Some(metric(seconds)?) },
        })
    }
}

/// Plain-text grid with columns Model, DSC, mIoU, NSD, Params, Seconds.
pub fn format_table(rows: &[TableRow]) -> String {
    let width = rows.iter().map(|r| r.model.len()).max().unwrap_or(0).max(5);
    let mut s = String::new();
    let _ = writeln!(s, "{:<width$}  {:>6}  {:>6}  {:>6}  {:>10}  {:>9}", "Model", "DSC", "mIoU", "NSD", "Params", "Seconds");
    let _ = writeln!(s, "{}", "-".repeat(width + 49));
    for r in rows {
        let params = r.params.map_or_else(|| "-".into(), |p| p.to_string());
        let secs = r.seconds.map_or_else(|| "-".into(), |t| format!("{t:.1}"));
        let _ = writeln!(s, "{:<width$}  {:>6.4}  {:>6.4}  {:>6.4}  {:>10}  {:>9}", r.model, r.dsc, r.miou, r.nsd, params, secs);
    }
    s
}
