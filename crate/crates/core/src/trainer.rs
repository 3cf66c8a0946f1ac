//! Training and evaluation: soft-Dice + cross-entropy loss, Adam, the
//! epoch loop with validation and best-checkpoint tracking, and the
//! four-variant comparison.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::blocks::BlockKind;
use crate::error::{invalid, Error, Result};
use crate::metrics::{format_table, LabelVolume, MetricsReport, TableRow};
use crate::nn::ParamStore;
use crate::rng::Rng;
use crate::segnet::{build_model, Model, SegConfig};
use crate::synthdata::{load_split, Manifest, Sample, Split};
use crate::tensor::{read_checkpoint, write_checkpoint, Graph, Precision, Real, Tensor, Var};

/// Smoothing term of the soft Dice.
pub const DICE_SMOOTH: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub dice_weight: f64,
    pub ce_weight: f64,
    pub val_interval: usize,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            lr: 1e-3,
            batch_size: 1,
            dice_weight: 1.0,
            ce_weight: 1.0,
            val_interval: 5,
            seed: 0,
            precision: Precision::Train,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.val_interval == 0 {
            return Err(invalid!("epochs, batch_size and val_interval must be at least 1"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(invalid!("learning rate must be positive, got {}", self.lr));
        }
        if self.dice_weight < 0.0 || self.ce_weight < 0.0 || self.dice_weight + self.ce_weight == 0.0 {
            return Err(invalid!("loss weights must be non-negative and not both zero"));
        }
        Ok(())
    }
}

/// `dice_weight · (1 − mean foreground soft Dice) + ce_weight · CE` for
/// logits `(K, D, H, W)` and integer labels over the same voxels.
pub fn loss<'g, T: Real>(logits: Var<'g, T>, labels: &[u8], dice_weight: f64, ce_weight: f64) -> Result<Var<'g, T>> {
    let shape = logits.shape();
    if shape.len() != 4 {
        return Err(invalid!("loss: logits must be (K, D, H, W), got {shape:?}"));
    }
    let k = shape[0];
    let n: usize = shape[1..].iter().product();
    if labels.len() != n {
        return Err(Error::shape("loss", &shape[1..], &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
        return Err(invalid!("loss: label {bad} out of range for {k} classes"));
    }
    let g = logits.graph();
    let mut onehot = vec![T::zero(); k * n];
    for (i, &l) in labels.iter().enumerate() {
        onehot[l as usize * n + i] = T::one();
    }
    let onehot = g.constant(Tensor::new(&[k, n], onehot)?);
    let flat = logits.reshape(&[k, n])?;

    let ce = flat
        .log_softmax(0)?
        .mul(onehot)?
        .sum()?
        .scale(T::lit(-1.0 / n as f64))?;

    let probs = flat.softmax(0)?.slice(0, 1, k)?;
    let fg = onehot.slice(0, 1, k)?;
    let smooth = T::lit(DICE_SMOOTH);
    let inter = probs.mul(fg)?.sum_axis(1)?.scale(T::lit(2.0))?.add_scalar(smooth)?;
    let denom = probs.add(fg)?.sum_axis(1)?.add_scalar(smooth)?;
    let dice = inter.div(denom)?.mean()?;
    let dice_loss = dice.neg()?.add_scalar(T::one())?;

    dice_loss.scale(T::lit(dice_weight))?.add(ce.scale(T::lit(ce_weight))?)
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Real>(params: &ParamStore<T>, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.ids().map(|id| vec![0.0; params.get(id).numel()]).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update; `grads` is indexed like the store.
    pub fn update<T: Real>(&mut self, params: &mut ParamStore<T>, grads: &[Vec<T>]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(invalid!("adam: {} gradients for {} parameters", grads.len(), self.m.len()));
        }
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            let p = params.get_mut(id).data_mut();
            for j in 0..p.len() {
                let gj = g[j].as_f64();
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let step = self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                p[j] = T::lit(p[j].as_f64() - step);
            }
        }
        Ok(())
    }
}

/// Per-voxel argmax of logits `(K, D, H, W)`.
pub fn argmax_labels<T: Real>(logits: &Tensor<T>) -> Vec<u8> {
    let k = logits.shape()[0];
    let n = logits.numel() / k;
    let d = logits.data();
    (0..n)
        .map(|i| {
            let mut best = 0;
            for c in 1..k {
                if d[c * n + i] > d[best * n + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

/// Predicted label volume for one sample.
pub fn predict<T: Real>(model: &Model<T>, sample: &Sample) -> Result<LabelVolume> {
    let logits = model.predict_logits(&sample.image.cast())?;
    let gt = &sample.labels;
    LabelVolume::new(gt.dims, argmax_labels(&logits), gt.spacing)
}

/// Mean foreground Dice over volumes, each scored separately.
pub fn mean_dsc<T: Real>(model: &Model<T>, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(invalid!("no volumes to evaluate"));
    }
    let k = model.config().num_classes;
    let mut total = 0.0;
    for s in samples {
        let pred = predict(model, s)?;
        total += (1..k as u8).map(|c| crate::metrics::dsc(&pred, &s.labels, c)).sum::<Result<f64>>()? / (k - 1) as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Per-volume reports and their average.
pub fn evaluate<T: Real>(model: &Model<T>, samples: &[Sample], tau: Option<f64>) -> Result<(Vec<MetricsReport>, MetricsReport)> {
    let k = model.config().num_classes;
    let reports = samples
        .iter()
        .map(|s| MetricsReport::compute(&predict(model, s)?, &s.labels, k, tau))
        .collect::<Result<Vec<_>>>()?;
    let avg = MetricsReport::average(&reports)?;
    Ok((reports, avg))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dsc: Option<f64>,
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Parameters with the best validation Dice.
    pub best: Model<T>,
    pub best_epoch: usize,
    pub best_val_dsc: f64,
    pub log: Vec<EpochLog>,
    pub seconds: f64,
}

pub const LOG_HEADER: &str = "epoch,train_loss,val_dsc";

impl EpochLog {
    /// One log line; `val_dsc` is empty for epochs without validation.
    pub fn to_csv(&self) -> String {
        let val = self.val_dsc.map_or_else(String::new, |v| format!("{v:.6}"));
        format!("{},{:.6},{val}", self.epoch, self.train_loss)
    }
}

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for e in log {
        let _ = writeln!(s, "{}", e.to_csv());
    }
    s
}

/// Data and output locations for [`train`].
#[derive(Debug, Clone, Default)]
pub struct TrainPaths {
    /// Best checkpoint destination.
    pub checkpoint: Option<PathBuf>,
    /// CSV training log destination.
    pub log: Option<PathBuf>,
}

/// Trains a fresh model on in-memory samples. `progress` receives each
/// epoch's log row as it completes.
pub fn train_samples<T: Real>(
    cfg: &TrainConfig,
    seg: &SegConfig,
    train_set: &[Sample],
    val_set: &[Sample],
    mut progress: impl FnMut(&EpochLog),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(invalid!("training needs at least one training and one validation volume"));
    }
    let start = Instant::now();
    let mut model = build_model::<T>(seg, cfg.seed)?;
    let mut adam = Adam::new(&model.params, cfg.lr);
    let mut order_rng = Rng::new(cfg.seed).fork(1);
    let images: Vec<Tensor<T>> = train_set.iter().map(|s| s.image.cast()).collect();
    let mut best: Option<(f64, usize, ParamStore<T>)> = None;
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order_rng.shuffle(&mut order);
        let mut total = 0.0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut sum: Option<Vec<Vec<T>>> = None;
            let mut batch_loss = 0.0;
            for &i in batch {
                let g = Graph::new();
                let ctx = model.params.bind(&g, true);
                let l = model
                    .net
                    .forward(&ctx, g.constant(images[i].clone()))
                    .and_then(|logits| loss(logits, &train_set[i].labels.labels, cfg.dice_weight, cfg.ce_weight))
                    .map_err(|e| step_error(epoch, step, e))?;
                let value = l.item().as_f64();
                if !value.is_finite() {
                    return Err(invalid!("non-finite loss at epoch {epoch}, step {step}"));
                }
                batch_loss += value;
                let grads = ctx.param_grads(&g.backward(l).map_err(|e| step_error(epoch, step, e))?);
                sum = Some(match sum {
                    None => grads,
                    Some(mut acc) => {
                        for (a, b) in acc.iter_mut().zip(&grads) {
                            for (x, y) in a.iter_mut().zip(b) {
                                *x += *y;
                            }
                        }
                        acc
                    }
                });
            }
            let mut grads = sum.expect("non-empty batch");
            if batch.len() > 1 {
                let inv = T::lit(1.0 / batch.len() as f64);
                grads.iter_mut().flatten().for_each(|g| *g *= inv);
            }
            adam.update(&mut model.params, &grads)?;
            total += batch_loss;
        }
        let validate = epoch % cfg.val_interval == 0 || epoch == cfg.epochs;
        let val_dsc = if validate { Some(mean_dsc(&model, val_set)?) } else { None };
        if let Some(v) = val_dsc {
            if best.as_ref().is_none_or(|b| v > b.0) {
                best = Some((v, epoch, model.params.clone()));
            }
        }
        let row = EpochLog {
            epoch,
            train_loss: total / train_set.len() as f64,
            val_dsc,
        };
        progress(&row);
        log.push(row);
    }
    let (best_val_dsc, best_epoch, params) = best.expect("the last epoch always validates");
    Ok(TrainOutcome {
        best: Model {
            net: model.net,
            params,
        },
        best_epoch,
        best_val_dsc,
        log,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn step_error(epoch: usize, step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => invalid!("non-finite value in {op} at epoch {epoch}, step {step}"),
        other => other,
    }
}

/// Trains from a manifest and writes the best checkpoint and the log.
pub fn train<T: Real>(
    cfg: &TrainConfig,
    seg: &SegConfig,
    manifest: &Manifest,
    paths: &TrainPaths,
    progress: impl FnMut(&EpochLog),
) -> Result<TrainOutcome<T>> {
    let train_set = load_split(manifest, Split::Train)?;
    let val_set = load_split(manifest, Split::Val)?;
    let out = train_samples(cfg, seg, &train_set, &val_set, progress)?;
    if let Some(path) = &paths.checkpoint {
        save_model(&out.best, path)?;
    }
    if let Some(path) = &paths.log {
        fs::write(path, log_csv(&out.log)).map_err(|e| Error::io(path, e))?;
    }
    Ok(out)
}

pub fn save_model<T: Real>(model: &Model<T>, path: &Path) -> Result<()> {
    let names = model.params.names();
    let tensors: Vec<&Tensor<T>> = model.params.ids().map(|id| model.params.get(id)).collect();
    write_checkpoint(path, names.iter().map(String::as_str).zip(tensors))
}

/// Rebuilds the architecture from `seg` and loads parameters from `path`.
pub fn load_model<T: Real>(seg: &SegConfig, path: &Path) -> Result<Model<T>> {
    let mut model = build_model::<T>(seg, 0)?;
    model.params.load_entries(&read_checkpoint(path)?)?;
    Ok(model)
}

/// One trained variant in a comparison.
#[derive(Debug, Clone)]
pub struct VariantResult {
    pub variant: BlockKind,
    pub report: MetricsReport,
    pub params: usize,
    pub seconds: f64,
    pub best_val_dsc: f64,
    pub log: Vec<EpochLog>,
}

impl VariantResult {
    pub fn table_row(&self) -> TableRow {
        TableRow {
            model: self.variant.model_name().to_string(),
            dsc: self.report.mean_dsc,
            miou: self.report.mean_miou,
            nsd: self.report.mean_nsd,
            params: Some(self.params),
            seconds: Some(self.seconds),
        }
    }
}

/// Trains each variant of `base` with the same schedule and scores it on
/// the test split.
pub fn compare_variants(
    cfg: &TrainConfig,
    base: &SegConfig,
    variants: &[BlockKind],
    manifest: &Manifest,
    tau: Option<f64>,
    mut progress: impl FnMut(BlockKind, &EpochLog),
) -> Result<Vec<VariantResult>> {
    let train_set = load_split(manifest, Split::Train)?;
    let val_set = load_split(manifest, Split::Val)?;
    let test_set = load_split(manifest, Split::Test)?;
    variants
        .iter()
        .map(|&variant| {
            let seg = SegConfig {
                variant,
                ..base.clone()
            };
            let out = match cfg.precision {
                Precision::Train => run_variant::<f32>(cfg, &seg, &train_set, &val_set, &test_set, tau, |e| progress(variant, e)),
                Precision::Verify => run_variant::<f64>(cfg, &seg, &train_set, &val_set, &test_set, tau, |e| progress(variant, e)),
            }?;
            Ok(out)
        })
        .collect()
}

fn run_variant<T: Real>(
    cfg: &TrainConfig,
    seg: &SegConfig,
    train_set: &[Sample],
    val_set: &[Sample],
    test_set: &[Sample],
    tau: Option<f64>,
    progress: impl FnMut(&EpochLog),
) -> Result<VariantResult> {
    let out = train_samples::<T>(cfg, seg, train_set, val_set, progress)?;
    let (_, report) = evaluate(&out.best, test_set, tau)?;
    Ok(VariantResult {
        variant: seg.variant,
        params: out.best.param_count(),
        seconds: out.seconds,
        best_val_dsc: out.best_val_dsc,
        log: out.log,
        report,
    })
}

/// The comparison as a plain-text table.
pub fn comparison_table(results: &[VariantResult]) -> String {
    format_table(&results.iter().map(VariantResult::table_row).collect::<Vec<_>>())
}
