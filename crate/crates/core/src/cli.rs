//! The `volumix` command line: data generation, training, evaluation,
//! verification, benchmarking and reporting.
//!
//! Every command first prints `# seed=<seed> config=<digest>`. Exit codes:
//! 0 success, 1 usage error, 2 a verification check failed, 3 runtime or
//! data error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::blocks::BlockKind;
use crate::config::RunConfig;
use crate::error::{invalid, Error, Result};
use crate::metrics::{format_table, MetricsReport, TableRow};
use crate::segnet::SegConfig;
use crate::seqmix::{bench_kernel, BenchKernel, BenchRow};
use crate::synthdata::{generate_dataset, load_split, Manifest, Split, Volume};
use crate::tensor::Precision;
use crate::trainer::{self, compare_variants, evaluate, log_csv, TrainPaths, LOG_HEADER};
use crate::verify;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VERIFY: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "volumix", version, about = "Verifiable 3D segmentation lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every command.
#[derive(Debug, Args)]
struct Common {
    /// key = value config file; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for data, initialization and shuffling
    #[arg(long)]
    seed: Option<u64>,
    /// Extra config override, repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Args)]
struct DataFlags {
    /// small_roi or multi_organ
    #[arg(long)]
    regime: Option<String>,
    /// Volume size, N or DxHxW
    #[arg(long)]
    size: Option<String>,
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long)]
    noise_std: Option<f64>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_val: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    val_interval: Option<usize>,
    /// Stem width; stage widths double from it
    #[arg(long)]
    width: Option<usize>,
    /// train (32-bit) or verify (64-bit)
    #[arg(long)]
    precision: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset and its manifest
    GenData {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataFlags,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one variant; writes best.ckpt, log.csv and run.cfg
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
        /// tsmamba, tshydra, mamba_swin or mambaout
        #[arg(long)]
        variant: Option<String>,
        /// Dataset manifest (file or directory); generated under --out when absent
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a split, or a prediction volume against labels
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint; its run.cfg is used unless --config is given
        #[arg(long, requires = "manifest", conflicts_with_all = ["pred", "gt"])]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Split to score
        #[arg(long, default_value = "test")]
        split: String,
        /// Predicted label volume (.volx)
        #[arg(long, requires = "gt")]
        pred: Option<PathBuf>,
        /// Reference label volume (.volx)
        #[arg(long, requires = "pred")]
        gt: Option<PathBuf>,
        /// Surface tolerance in mm (default: largest voxel spacing)
        #[arg(long)]
        tau: Option<f64>,
        /// Also write the CSV here
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of the building blocks
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// all, or one of gsc, tom, tsmamba, tshydra, mamba_swin, mambaout, fue, decoder, loss_model
        #[arg(long, default_value = "all")]
        module: String,
    },
    /// Compare every mixer and metric against its dense oracle
    OracleCheck {
        #[command(flatten)]
        common: Common,
        /// Random cases per oracle
        #[arg(long, default_value_t = 200)]
        cases: usize,
    },
    /// Time the mixing kernels; CSV on stdout
    Bench {
        #[command(flatten)]
        common: Common,
        /// Comma-separated: scan, qs, dense_scan, dense_qs, or all
        #[arg(long, default_value = "all")]
        kernel: String,
        /// Comma-separated sequence lengths
        #[arg(long, default_value = "256,512,1024,2048")]
        lengths: String,
        /// State size
        #[arg(long, default_value_t = 4)]
        n: usize,
        /// Channels
        #[arg(long, default_value_t = 4)]
        d: usize,
    },
    /// Train and test every variant under one schedule
    Compare {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
        /// Comma-separated variants (default: all four)
        #[arg(long)]
        variants: Option<String>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        tau: Option<f64>,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge metric or summary CSVs into one comparison table
    Report {
        #[command(flatten)]
        common: Common,
        /// CSV files from eval or compare
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Also write the merged summary CSV here
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Verify(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(Error::io("<stdout>", e))
    }
}

type Outcome = std::result::Result<(), Failure>;

/// Runs the command line `args` (program name first), writing reports to
/// `out` and diagnostics to stderr. Returns the exit code.
pub fn run<I, S>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            if code == EXIT_OK {
                let _ = write!(out, "{e}");
            } else {
                eprint!("{e}");
            }
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Verify(msg)) => {
            eprintln!("verification failed: {msg}");
            EXIT_VERIFY
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    load_config_or(common, None)
}

/// `--config`, else `fallback`, else the defaults; then `--set` and `--seed`.
fn load_config_or(common: &Common, fallback: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match common.config.as_deref().or(fallback) {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| invalid!("--set expects KEY=VALUE, got {kv:?}"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn apply_data(cfg: &mut RunConfig, f: &DataFlags) -> Result<()> {
    if let Some(v) = &f.regime {
        cfg.set("regime", v)?;
    }
    if let Some(v) = &f.size {
        cfg.set("size", v)?;
    }
    cfg.num_classes = f.num_classes.or(cfg.num_classes);
    cfg.noise_std = f.noise_std.unwrap_or(cfg.noise_std);
    cfg.n_train = f.n_train.unwrap_or(cfg.n_train);
    cfg.n_val = f.n_val.unwrap_or(cfg.n_val);
    cfg.n_test = f.n_test.unwrap_or(cfg.n_test);
    Ok(())
}

fn apply_train(cfg: &mut RunConfig, f: &TrainFlags) -> Result<()> {
    cfg.epochs = f.epochs.unwrap_or(cfg.epochs);
    cfg.lr = f.lr.unwrap_or(cfg.lr);
    cfg.val_interval = f.val_interval.unwrap_or(cfg.val_interval);
    if let Some(w) = f.width {
        cfg.set("width", &w.to_string())?;
    }
    if let Some(p) = &f.precision {
        cfg.set("precision", p)?;
    }
    Ok(())
}

fn header(out: &mut dyn Write, cfg: &RunConfig) -> std::io::Result<()> {
    writeln!(out, "# seed={} config={}", cfg.seed, cfg.digest())
}

fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("manifest.tsv")
    } else {
        path.to_path_buf()
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// The given manifest, or a dataset generated from `cfg` under `dir/data`.
fn obtain_manifest(cfg: &RunConfig, given: Option<&Path>, dir: &Path, out: &mut dyn Write) -> std::result::Result<Manifest, Failure> {
    match given {
        Some(p) => Ok(Manifest::load(&manifest_path(p))?),
        None => {
            let data = dir.join("data");
            writeln!(out, "# generating {} volumes into {}", cfg.n_train + cfg.n_val + cfg.n_test, data.display())?;
            Ok(generate_dataset(&cfg.phantom_spec(), cfg.n_train, cfg.n_val, cfg.n_test, &data)?)
        }
    }
}

fn dispatch(command: Command, out: &mut dyn Write) -> Outcome {
    match command {
        Command::GenData { common, data, out: dir } => {
            let mut cfg = load_config(&common)?;
            apply_data(&mut cfg, &data)?;
            cfg.phantom_spec().validate()?;
            header(out, &cfg)?;
            let manifest = generate_dataset(&cfg.phantom_spec(), cfg.n_train, cfg.n_val, cfg.n_test, &dir)?;
            for split in [Split::Train, Split::Val, Split::Test] {
                writeln!(out, "{}\t{}", split.name(), manifest.split(split).count())?;
            }
            writeln!(out, "manifest\t{}", dir.join("manifest.tsv").display())?;
            Ok(())
        }
        Command::Train {
            common,
            train,
            variant,
            manifest,
            out: dir,
        } => {
            let mut cfg = load_config(&common)?;
            apply_train(&mut cfg, &train)?;
            if let Some(v) = variant {
                cfg.set("variant", &v)?;
            }
            cfg.validate()?;
            header(out, &cfg)?;
            create_dir(&dir)?;
            let manifest = obtain_manifest(&cfg, manifest.as_deref(), &dir, out)?;
            write_file(&dir.join("run.cfg"), &cfg.to_text())?;
            let paths = TrainPaths {
                checkpoint: Some(dir.join("best.ckpt")),
                log: Some(dir.join("log.csv")),
            };
            writeln!(out, "{LOG_HEADER}")?;
            let mut progress = |e: &trainer::EpochLog| {
                let _ = writeln!(out, "{}", e.to_csv());
                let _ = out.flush();
            };
            let (best_epoch, best_val, params, seconds) = match cfg.precision {
                Precision::Train => {
                    let o = trainer::train::<f32>(&cfg.train_config(), &cfg.seg_config(), &manifest, &paths, &mut progress)?;
                    (o.best_epoch, o.best_val_dsc, o.best.param_count(), o.seconds)
                }
                Precision::Verify => {
                    let o = trainer::train::<f64>(&cfg.train_config(), &cfg.seg_config(), &manifest, &paths, &mut progress)?;
                    (o.best_epoch, o.best_val_dsc, o.best.param_count(), o.seconds)
                }
            };
            writeln!(
                out,
                "# best epoch {best_epoch} val_dsc {best_val:.4} params {params} seconds {seconds:.1} checkpoint {}",
                dir.join("best.ckpt").display()
            )?;
            Ok(())
        }
        Command::Eval {
            common,
            ckpt,
            manifest,
            split,
            pred,
            gt,
            tau,
            out: csv_path,
        } => {
            // Without --config, a checkpoint's own run.cfg describes its network.
            let sibling = ckpt.as_ref().map(|c| c.with_file_name("run.cfg")).filter(|p| p.exists());
            let mut cfg = load_config_or(&common, sibling.as_deref())?;
            if tau.is_some() {
                cfg.tau = tau;
            }
            header(out, &cfg)?;
            let csv = match (ckpt, manifest, pred, gt) {
                (Some(ckpt), Some(manifest), _, _) => eval_checkpoint(&cfg, &ckpt, &manifest, split.parse()?, out)?,
                (None, _, Some(pred), Some(gt)) => {
                    let (p, g) = (Volume::load(&pred)?.to_labels()?, Volume::load(&gt)?.to_labels()?);
                    let k = p.labels.iter().chain(&g.labels).copied().max().unwrap_or(0) as usize + 1;
                    let report = MetricsReport::compute(&p, &g, k.max(2), cfg.tau)?;
                    format!("{}\n{}", MetricsReport::CSV_HEADER, report.to_csv_rows("pred"))
                }
                _ => return Err(Failure::Runtime(invalid!("eval needs --ckpt with --manifest, or --pred with --gt"))),
            };
            write!(out, "{csv}")?;
            if let Some(path) = csv_path {
                write_file(&path, &csv)?;
            }
            Ok(())
        }
        Command::Gradcheck { common, module } => {
            if module != "all" && !verify::GRAD_MODULES.contains(&module.as_str()) {
                return Err(Failure::Usage(format!(
                    "unknown module {module:?} (expected all or one of {})",
                    verify::GRAD_MODULES.join(", ")
                )));
            }
            let cfg = load_config(&common)?;
            header(out, &cfg)?;
            let results = verify::gradcheck_suite(&module, cfg.seed)?;
            report_checks(out, &results)
        }
        Command::OracleCheck { common, cases } => {
            let cfg = load_config(&common)?;
            header(out, &cfg)?;
            let mut results = verify::oracle_suite(cases, cfg.seed)?;
            let c = verify::causality_probe(cases, cfg.seed)?;
            writeln!(
                out,
                "causality          scan_past_change={:.3e} qs_past_change={:.3e} {}",
                c.scan_past_change,
                c.quasi_past_change,
                if c.scan_is_causal() && c.quasi_is_non_causal() { "ok" } else { "FAIL" }
            )?;
            if !(c.scan_is_causal() && c.quasi_is_non_causal()) {
                results.push(verify::CheckResult {
                    name: "causality".into(),
                    cases,
                    max_err: f64::INFINITY,
                    tol: 0.0,
                });
            }
            report_checks(out, &results)
        }
        Command::Bench {
            common,
            kernel,
            lengths,
            n,
            d,
        } => {
            let cfg = load_config(&common)?;
            let kernels: Vec<BenchKernel> = if kernel == "all" {
                BenchKernel::ALL.to_vec()
            } else {
                kernel
                    .split(',')
                    .map(|k| k.trim().parse())
                    .collect::<Result<_>>()
                    .map_err(|e| Failure::Usage(e.to_string()))?
            };
            let lengths: Vec<usize> = lengths
                .split(',')
                .map(|l| l.trim().parse().ok().filter(|&l| l > 0))
                .collect::<Option<_>>()
                .ok_or_else(|| Failure::Usage(format!("--lengths expects positive integers, got {lengths:?}")))?;
            header(out, &cfg)?;
            writeln!(out, "{}", BenchRow::HEADER)?;
            for k in kernels {
                for &l in &lengths {
                    writeln!(out, "{}", bench_kernel(k, l, n, d, cfg.seed)?.to_csv())?;
                }
            }
            Ok(())
        }
        Command::Compare {
            common,
            train,
            variants,
            manifest,
            tau,
            out: dir,
        } => {
            let mut cfg = load_config(&common)?;
            apply_train(&mut cfg, &train)?;
            if tau.is_some() {
                cfg.tau = tau;
            }
            cfg.validate()?;
            let kinds: Vec<BlockKind> = match variants {
                Some(v) => v.split(',').map(|k| k.trim().parse()).collect::<Result<_>>()?,
                None => BlockKind::ALL.to_vec(),
            };
            header(out, &cfg)?;
            create_dir(&dir)?;
            let manifest = obtain_manifest(&cfg, manifest.as_deref(), &dir, out)?;
            write_file(&dir.join("run.cfg"), &cfg.to_text())?;
            let results = compare_variants(&cfg.train_config(), &cfg.seg_config(), &kinds, &manifest, cfg.tau, |k, e| {
                let val = e.val_dsc.map_or_else(String::new, |v| format!(" val_dsc={v:.4}"));
                let _ = writeln!(out, "# {k} epoch {} loss={:.5}{val}", e.epoch, e.train_loss);
            })?;
            let mut metrics = format!("{}\n", MetricsReport::CSV_HEADER);
            let mut summary = format!("{}\n", TableRow::CSV_HEADER);
            for r in &results {
                metrics.push_str(&r.report.to_csv_rows(r.variant.name()));
                summary.push_str(&r.table_row().to_csv());
                summary.push('\n');
                write_file(&dir.join(format!("log_{}.csv", r.variant.name())), &log_csv(&r.log))?;
            }
            write_file(&dir.join("metrics.csv"), &metrics)?;
            write_file(&dir.join("summary.csv"), &summary)?;
            let table = trainer::comparison_table(&results);
            write_file(&dir.join("table.txt"), &table)?;
            write!(out, "{table}")?;
            Ok(())
        }
        Command::Report { common, inputs, out: csv_path } => {
            let cfg = load_config(&common)?;
            header(out, &cfg)?;
            let mut rows = Vec::new();
            for path in &inputs {
                rows.extend(read_rows(path)?);
            }
            write!(out, "{}", format_table(&rows))?;
            if let Some(path) = csv_path {
                let mut s = format!("{}\n", TableRow::CSV_HEADER);
                for r in &rows {
                    s.push_str(&r.to_csv());
                    s.push('\n');
                }
                write_file(&path, &s)?;
            }
            Ok(())
        }
    }
}

fn report_checks(out: &mut dyn Write, results: &[verify::CheckResult]) -> Outcome {
    for r in results {
        writeln!(out, "{r}")?;
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verify(failed.join(", ")))
    }
}

/// Metrics CSV of the split average; per-volume Dice goes to `out` as
/// comments.
fn eval_checkpoint(cfg: &RunConfig, ckpt: &Path, manifest: &Path, split: Split, out: &mut dyn Write) -> std::result::Result<String, Failure> {
    let manifest = Manifest::load(&manifest_path(manifest))?;
    let samples = load_split(&manifest, split)?;
    if samples.is_empty() {
        return Err(invalid!("manifest has no {} volumes", split.name()).into());
    }
    let seg: SegConfig = cfg.seg_config();
    let (per_volume, mean) = match cfg.precision {
        Precision::Train => evaluate(&trainer::load_model::<f32>(&seg, ckpt)?, &samples, cfg.tau)?,
        Precision::Verify => evaluate(&trainer::load_model::<f64>(&seg, ckpt)?, &samples, cfg.tau)?,
    };
    for (i, r) in per_volume.iter().enumerate() {
        writeln!(out, "# {}_{i:03} dsc={:.4} miou={:.4} nsd={:.4}", split.name(), r.mean_dsc, r.mean_miou, r.mean_nsd)?;
    }
    Ok(format!("{}\n{}", MetricsReport::CSV_HEADER, mean.to_csv_rows(seg.variant.name())))
}

/// Table rows from a summary CSV, or the `mean` rows of a metrics CSV.
fn read_rows(path: &Path) -> Result<Vec<TableRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
    let bad = |detail: String| Error::Format { kind: "report input", detail };
    let head = lines.next().ok_or_else(|| bad(format!("{}: empty file", path.display())))?;
    if head == TableRow::CSV_HEADER {
        lines.map(TableRow::from_csv).collect()
    } else if head == MetricsReport::CSV_HEADER {
        let mut rows = Vec::new();
        for line in lines {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad(format!("{}: {line}", path.display())));
            }
            if f[1] != "mean" {
                continue;
            }
            let metric = |v: &str| v.parse::<f64>().map_err(|_| bad(format!("{}: {line}", path.display())));
            let model = f[0].parse::<BlockKind>().map_or_else(|_| f[0].to_string(), |k| k.model_name().to_string());
            rows.push(TableRow {
                model,
                dsc: metric(f[2])?,
                miou: metric(f[3])?,
                nsd: metric(f[4])?,
                params: None,
                seconds: None,
            });
        }
        Ok(rows)
    } else {
        Err(bad(format!("{}: unrecognized header {head:?}", path.display())))
    }
}
